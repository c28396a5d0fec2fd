"""Numpy implementations of the rotated-rectangle overlap kernels.

This is the pure-Python backend selected when the compiled extension is
unavailable (or forced via CQDET_PURE_PYTHON=1). The clipping loop is
vectorized across box pairs with padded vertex buffers; the arithmetic
mirrors the compiled kernel step for step.

Boxes are (n, 5) arrays of [cx, cy, length, width, yaw]; polygons are kept
counter-clockwise so the Sutherland-Hodgman inside test is a left-of-edge
test.
"""

import numpy as np

# 4 starting vertices + one potential extra vertex per clip edge
_MAX_VERTS = 10


def box_corners(boxes):
    """(n,5) boxes -> (n,4,2) CCW corner coordinates."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, l, w, yaw = (boxes[:, i] for i in range(5))
    hx, hy = l / 2.0, w / 2.0
    local = np.stack([
        np.stack([hx, hy], axis=1),
        np.stack([-hx, hy], axis=1),
        np.stack([-hx, -hy], axis=1),
        np.stack([hx, -hy], axis=1),
    ], axis=1)
    c, s = np.cos(yaw), np.sin(yaw)
    rx = c[:, None] * local[:, :, 0] - s[:, None] * local[:, :, 1]
    ry = s[:, None] * local[:, :, 0] + c[:, None] * local[:, :, 1]
    return np.stack([cx[:, None] + rx, cy[:, None] + ry], axis=2)


def _clip_quads(quads_a, quads_b):
    """Clip each CCW quad in quads_a by the matching quad in quads_b.

    Returns (verts, counts): padded (n, _MAX_VERTS, 2) polygon buffer and the
    per-row vertex count of the intersection polygon.
    """
    n = quads_a.shape[0]
    verts = np.zeros((n, _MAX_VERTS, 2), dtype=np.float64)
    verts[:, :4] = quads_a
    counts = np.full(n, 4, dtype=np.int64)
    rows = np.arange(n)

    for j in range(4):
        ox = quads_b[:, j, 0]
        oy = quads_b[:, j, 1]
        ex = quads_b[:, (j + 1) % 4, 0] - ox
        ey = quads_b[:, (j + 1) % 4, 1] - oy

        maxc = int(counts.max()) if n else 0
        if maxc == 0:
            break
        # signed distance of every buffered vertex from the clip edge
        d = ex[:, None] * (verts[:, :maxc, 1] - oy[:, None]) \
            - ey[:, None] * (verts[:, :maxc, 0] - ox[:, None])
        slot = np.arange(maxc)
        valid = slot[None, :] < counts[:, None]
        nxt = slot[None, :] + 1
        nxt = np.where(nxt >= counts[:, None], 0, nxt)
        d_nxt = d[rows[:, None], nxt]
        v_nxt = verts[rows[:, None], nxt]

        cur_in = d >= 0.0
        nxt_in = d_nxt >= 0.0
        emit_cur = valid & cur_in
        emit_int = valid & (cur_in != nxt_in)

        denom = d - d_nxt
        t = d / np.where(denom == 0.0, 1.0, denom)
        inter = verts[:, :maxc] + t[:, :, None] * (v_nxt - verts[:, :maxc])

        # interleave: vertex slot 2i, intersection slot 2i+1
        emit = np.empty((n, 2 * maxc), dtype=bool)
        emit[:, 0::2] = emit_cur
        emit[:, 1::2] = emit_int
        cand = np.empty((n, 2 * maxc, 2), dtype=np.float64)
        cand[:, 0::2] = verts[:, :maxc]
        cand[:, 1::2] = inter

        pos = np.cumsum(emit, axis=1) - 1
        out = np.zeros_like(verts)
        src = emit.nonzero()
        out[src[0], pos[src]] = cand[src]
        verts = out
        counts = emit.sum(axis=1)
    return verts, counts


def _shoelace(verts, counts):
    n, maxv, _ = verts.shape
    rows = np.arange(n)
    slot = np.arange(maxv)
    valid = slot[None, :] < counts[:, None]
    nxt = np.where(slot[None, :] + 1 >= counts[:, None], 0, slot[None, :] + 1)
    x, y = verts[:, :, 0], verts[:, :, 1]
    xn = x[rows[:, None], nxt]
    yn = y[rows[:, None], nxt]
    terms = np.where(valid, x * yn - xn * y, 0.0)
    area = 0.5 * np.abs(terms.sum(axis=1))
    return np.where(counts >= 3, area, 0.0)


def _canonical_order(boxes_a, boxes_b):
    """Order each pair lexicographically so the clip direction (and thus the
    floating-point result) is independent of argument order."""
    swap = np.zeros(len(boxes_a), dtype=bool)
    decided = np.zeros(len(boxes_a), dtype=bool)
    for c in range(5):
        lt = (boxes_b[:, c] < boxes_a[:, c]) & ~decided
        gt = (boxes_b[:, c] > boxes_a[:, c]) & ~decided
        swap |= lt
        decided |= lt | gt
    first = np.where(swap[:, None], boxes_b, boxes_a)
    second = np.where(swap[:, None], boxes_a, boxes_b)
    return first, second


def overlap_area_pairs(boxes_a, boxes_b):
    """Intersection area of corresponding rotated rectangles, (n,)."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    if boxes_a.shape != boxes_b.shape:
        raise ValueError("paired boxes must have equal shapes")
    if boxes_a.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    first, second = _canonical_order(boxes_a, boxes_b)
    verts, counts = _clip_quads(box_corners(first), box_corners(second))
    return _shoelace(verts, counts)


def iou_pairs(boxes_a, boxes_b):
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    inter = overlap_area_pairs(boxes_a, boxes_b)
    union = boxes_a[:, 2] * boxes_a[:, 3] + boxes_b[:, 2] * boxes_b[:, 3] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def iou_matrix(boxes_a, boxes_b, chunk=262144):
    """Pairwise (n, m) rotated-rectangle IoU, chunked to bound memory."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    n, m = boxes_a.shape[0], boxes_b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    if n == 0 or m == 0:
        return out
    rows_per_chunk = max(1, chunk // m)
    for i0 in range(0, n, rows_per_chunk):
        i1 = min(n, i0 + rows_per_chunk)
        aa = np.repeat(boxes_a[i0:i1], m, axis=0)
        bb = np.tile(boxes_b, (i1 - i0, 1))
        out[i0:i1] = iou_pairs(aa, bb).reshape(i1 - i0, m)
    return out
