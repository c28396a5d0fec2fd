"""Multi-scale center proposal network.

Three-scale feature pyramid with CBAM gating, center/corner heatmap heads on
the finest scale, Gaussian target rendering, and top-N proposal selection
with ground-truth injection for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffgrid as dg
from .geom import encode_box
from .layers import Conv2d, ConvBlock, MLP2, Module, UpsampleConv
from .scenes import BevGrid

N_CLASSES = 3


class Heatmap(BevGrid):
    """Per-class score grid in [0,1] (post-sigmoid), one channel per class."""


@dataclass
class FeaturePyramid:
    """scales[0] is the finest (half the input cell size), scales[2] the
    coarsest; channel counts are equal across scales."""

    scales: list  # of BevGrid
    padded: bool = False  # input was odd-sized and zero-padded to even

    def __iter__(self):
        return iter(self.scales)


@dataclass(frozen=True)
class CenterProposal:
    class_id: int
    row: int
    col: int
    score: float
    world_xy: tuple
    is_gt: bool = False


class CBAM(Module):
    """Channel attention (shared MLP over global avg/max pools) followed by
    spatial attention (7x7 conv over channel mean/max maps)."""

    def __init__(self, rng, c, name, reduction=16):
        hidden = max(c // min(reduction, c), 1)
        self.mlp = MLP2(rng, c, hidden, c, f"{name}.channel")
        self.spatial = Conv2d(rng, 2, 1, f"{name}.spatial", k=7)

    def __call__(self, x: dg.Value) -> dg.Value:
        c = x.shape[2]
        avg_gate = self.mlp(dg.reshape(dg.avgpool_global(x), (1, c)))
        max_gate = self.mlp(dg.reshape(dg.maxpool_global(x), (1, c)))
        gate_c = dg.sigmoid(dg.reshape(dg.add(avg_gate, max_gate), (c,)))
        x = dg.scale_channels(x, gate_c)
        stats = dg.concat([dg.channel_mean(x), dg.channel_max(x)], axis=2)
        gate_s = dg.sigmoid(self.spatial(stats))
        return dg.scale_spatial(x, gate_s)


class PyramidNet(Module):
    """BEV feature -> three scales: conv blocks at the input scale, one
    transpose-conv upsample, one strided downsample, CBAM on each scale."""

    def __init__(self, rng, c_in, d, name="pyramid"):
        self.pre1 = ConvBlock(rng, c_in, d, f"{name}.pre1")
        self.pre2 = ConvBlock(rng, d, d, f"{name}.pre2")
        self.up = UpsampleConv(rng, d, d, f"{name}.up")
        self.up_conv = ConvBlock(rng, d, d, f"{name}.up_conv")
        self.down = ConvBlock(rng, d, d, f"{name}.down", stride=2)
        self.down_conv = ConvBlock(rng, d, d, f"{name}.down_conv")
        self.cbam = [CBAM(rng, d, f"{name}.cbam{s}") for s in (1, 2, 3)]

    def __call__(self, bev: BevGrid) -> FeaturePyramid:
        x = bev.values
        padded = False
        h, w, _ = x.shape
        if h % 2 or w % 2:
            x = dg.embed2d(x, (h + h % 2, w + w % 2), (0, 0))
            padded = True
        mid = self.pre2(self.pre1(x))
        fine = self.up_conv(self.up(mid))
        coarse = self.down_conv(self.down(mid))
        cell = bev.cell_size
        grids = [
            BevGrid(self.cbam[0](fine), cell / 2.0, bev.origin),
            BevGrid(self.cbam[1](mid), cell, bev.origin),
            BevGrid(self.cbam[2](coarse), cell * 2.0, bev.origin),
        ]
        return FeaturePyramid(scales=grids, padded=padded)


class HeatmapHead(Module):
    """Two conv blocks, a 1x1 conv, sigmoid.

    The output bias starts at -log((1-p)/p) for a prior score p, so the
    untrained map sits near p instead of 0.5; without it the early focal
    negatives pressure saturates the sigmoid below the loss clamp, where
    positives can no longer recover."""

    def __init__(self, rng, d, n_out, name, bias_prior=0.1):
        self.b1 = ConvBlock(rng, d, d, f"{name}.b1")
        self.b2 = ConvBlock(rng, d, d, f"{name}.b2")
        self.out = Conv2d(rng, d, n_out, f"{name}.out", k=1)
        if bias_prior is not None:
            self.out.b.data[...] = -math.log((1.0 - bias_prior) / bias_prior)

    def __call__(self, x: dg.Value) -> dg.Value:
        return dg.sigmoid(self.out(self.b2(self.b1(x))))


def predict_heads(pyr: FeaturePyramid, center_head: HeatmapHead,
                  corner_head: HeatmapHead):
    """Run both heads on the finest scale."""
    fine = pyr.scales[0]
    center = Heatmap(center_head(fine.values), fine.cell_size, fine.origin)
    corner = Heatmap(corner_head(fine.values), fine.cell_size, fine.origin)
    return center, corner


# ---------------------------------------------------------------------------
# target rendering


def gaussian_radius(box_l_cells: float, box_w_cells: float, min_overlap: float = 0.1):
    """CornerNet-style radius for a BEV footprint, in cells."""
    height, width = box_l_cells, box_w_cells
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 ** 2 - 4 * a1 * c1, 0.0))) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(max(b2 ** 2 - 4 * a2 * c2, 0.0))) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3 ** 2 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return min(r1, r2, r3)


def _splat(grid: np.ndarray, row: int, col: int, radius: int):
    """Max-combine a Gaussian with peak 1 at (row, col), sigma = radius/3."""
    h, w = grid.shape
    sigma = radius / 3.0
    r0, r1 = max(row - radius, 0), min(row + radius + 1, h)
    c0, c1 = max(col - radius, 0), min(col + radius + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    rr = np.arange(r0, r1) - row
    cc = np.arange(c0, c1) - col
    g = np.exp(-(rr[:, None] ** 2 + cc[None, :] ** 2) / (2.0 * sigma * sigma))
    np.maximum(grid[r0:r1, c0:c1], g, out=grid[r0:r1, c0:c1])


@dataclass
class TargetMaps:
    center: np.ndarray    # (h, w, l)
    corner: np.ndarray    # (h, w, l)
    reg: np.ndarray       # (h, w, 8)
    reg_mask: np.ndarray  # (h, w) bool
    gt_cells: list        # [(class_id, row, col)] of rendered centers
    skipped: int          # annotations whose center fell outside the grid


def render_targets(annotations, h: int, w: int, cell_size: float, origin,
                   n_classes: int = N_CLASSES, min_overlap: float = 0.1,
                   min_radius: int = 2) -> TargetMaps:
    """Render Gaussian center/corner heatmap targets and the regression map.

    Center targets peak at exactly 1.0 at each annotated center cell and
    overlapping splats combine by elementwise max. The corner target renders
    the four edge midpoints plus the center at half radius. The regression
    map stores the box encoding at each annotated center cell.
    """
    center = np.zeros((h, w, n_classes))
    corner = np.zeros((h, w, n_classes))
    reg = np.zeros((h, w, 8))
    mask = np.zeros((h, w), dtype=bool)
    gt_cells = []
    skipped = 0
    ox, oy = origin
    for a in annotations:
        b = a.box
        col = int(math.floor((b.cx - ox) / cell_size))
        row = int(math.floor((b.cy - oy) / cell_size))
        if not (0 <= row < h and 0 <= col < w):
            skipped += 1
            continue
        radius = max(int(gaussian_radius(b.l / cell_size, b.w / cell_size, min_overlap)),
                     min_radius)
        _splat(center[:, :, a.class_id], row, col, radius)
        cr = max(radius // 2, 1)
        cy, sy = math.cos(b.yaw), math.sin(b.yaw)
        keypoints = [(b.cx, b.cy)]
        for dx, dy in ((b.l / 2, 0.0), (-b.l / 2, 0.0), (0.0, b.w / 2), (0.0, -b.w / 2)):
            keypoints.append((b.cx + cy * dx - sy * dy, b.cy + sy * dx + cy * dy))
        for kx, ky in keypoints:
            kc = int(math.floor((kx - ox) / cell_size))
            kr = int(math.floor((ky - oy) / cell_size))
            if 0 <= kr < h and 0 <= kc < w:
                _splat(corner[:, :, a.class_id], kr, kc, cr)
        cell_origin = (ox + col * cell_size, oy + row * cell_size)
        reg[row, col] = encode_box(b, cell_origin, cell_size).as_array()
        mask[row, col] = True
        gt_cells.append((a.class_id, row, col))
    return TargetMaps(center=center, corner=corner, reg=reg, reg_mask=mask,
                      gt_cells=gt_cells, skipped=skipped)


# ---------------------------------------------------------------------------
# proposal selection


def _local_max_mask(scores: np.ndarray) -> np.ndarray:
    """3x3 local-maximum mask per class channel (ties count as maxima)."""
    h, w, l = scores.shape
    padded = np.full((h + 2, w + 2, l), -np.inf)
    padded[1:-1, 1:-1] = scores
    best = np.full((h, w, l), -np.inf)
    for di in range(3):
        for dj in range(3):
            np.maximum(best, padded[di:di + h, dj:dj + w], out=best)
    return scores >= best


def select_proposals(hm: Heatmap, n: int, mode: str = "eval",
                     local_max: bool | None = None, gt_cells=None) -> list:
    """Pick center proposals from the heatmap.

    eval mode: optional 3x3 local-maximum suppression, then the global top-n
    across all class channels (ties broken by ascending class, row, col).
    train mode: all deduplicated GT center cells first (carrying the predicted
    score at that cell), the remainder filled with top-scoring non-GT cells.
    If local-max filtering leaves fewer than n candidates, fewer proposals
    are returned.
    """
    if n <= 0:
        raise ValueError("proposal count must be positive")
    scores = hm.array
    h, w, l = scores.shape
    if n > h * w * l:
        raise ValueError(f"requested {n} proposals from {h * w * l} cells")
    if local_max is None:
        local_max = mode == "eval"
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown proposal mode {mode!r}")

    def make(cls, row, col, is_gt=False):
        xy = hm.cell_to_world(row, col)
        return CenterProposal(class_id=int(cls), row=int(row), col=int(col),
                              score=float(scores[row, col, cls]),
                              world_xy=(float(xy[0]), float(xy[1])), is_gt=is_gt)

    head = []
    taken = set()
    if mode == "train":
        for cls, row, col in gt_cells or []:
            key = (int(cls), int(row), int(col))
            if key in taken:
                continue
            taken.add(key)
            head.append(make(cls, row, col, is_gt=True))
        if len(head) >= n:
            return head[:n]

    flat = scores.copy()
    if mode == "eval" and local_max:
        flat = np.where(_local_max_mask(flat), flat, -np.inf)
    for cls, row, col in taken:
        flat[row, col, cls] = -np.inf

    s = flat.reshape(-1)
    valid = np.nonzero(s > -np.inf)[0]
    remaining = n - len(head)
    k = min(remaining, len(valid))
    if k > 0:
        # full sort: score desc, ties by ascending (class, row, col)
        rows, rem = np.divmod(valid, w * l)
        cols, classes = np.divmod(rem, l)
        order = np.lexsort((cols, rows, classes, -s[valid]))[:k]
        head.extend(make(classes[i], rows[i], cols[i]) for i in order)
    return head


def query_features(pyr: FeaturePyramid, proposals) -> dg.Value:
    """Gather finest-scale features at the proposal cells (differentiably)."""
    fine = pyr.scales[0]
    h, w, d = fine.values.shape
    idx = np.array([p.row * w + p.col for p in proposals], dtype=np.int64)
    flat = dg.reshape(fine.values, (h * w, d))
    return dg.gather_rows(flat, idx)


# ---------------------------------------------------------------------------
# dumps


def write_heatmap_pgm(hm: Heatmap, path_prefix: str):
    """One 16-bit PGM (big-endian, row-major) per class channel."""
    arr = np.clip(hm.array, 0.0, 1.0)
    paths = []
    for k in range(arr.shape[2]):
        path = f"{path_prefix}_class{k}.pgm"
        data = np.round(arr[:, :, k] * 65535.0).astype(">u2")
        with open(path, "wb") as f:
            f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
            f.write(data.tobytes())
        paths.append(path)
    return paths


def write_proposals(path, proposals):
    """Newline-delimited records: class, row, col, score."""
    with open(path, "w", encoding="ascii") as f:
        for p in proposals:
            f.write(f"{p.class_id} {p.row} {p.col} {p.score:.9g}\n")
