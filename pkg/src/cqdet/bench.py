"""Benchmarks: cross-attention wall-time scaling in the query count, and the
compiled-vs-pure geometry kernel comparison."""

from __future__ import annotations

import time

import numpy as np

from . import diffgrid as dg
from . import kernels
from . import transformer as tfm
from .cpn import CenterProposal, FeaturePyramid
from .scenes import BevGrid


def _fixed_pyramid(rng, d, hw):
    h, w = hw
    grids = []
    for s, cell in enumerate((0.4, 0.8, 1.6)):
        hs, ws = h >> s, w >> s
        grids.append(BevGrid(dg.Value(rng.standard_normal((hs, ws, d))), cell,
                             (0.0, 0.0)))
    return FeaturePyramid(scales=grids)


def _proposals(rng, n, h, w, cell=0.4):
    rows = rng.integers(0, h, n)
    cols = rng.integers(0, w, n)
    return [CenterProposal(class_id=int(rng.integers(0, 3)), row=int(r), col=int(c),
                           score=0.5, world_xy=(cell * (c + 0.5), cell * (r + 0.5)))
            for r, c in zip(rows, cols)]


def linear_fit_r2(xs, ys):
    """Least-squares t = a + b*n; returns (a, b, R^2)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    a_mat = np.stack([np.ones_like(xs), xs], axis=1)
    coef, *_ = np.linalg.lstsq(a_mat, ys, rcond=None)
    pred = a_mat @ coef
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def bench_attention(variant="windowed", n_list=(100, 200, 400, 800, 1600),
                    d=64, heads=4, map_hw=(128, 128), seed=0, repeats=7):
    """Time one cross-attention layer forward pass as a function of the query
    count at a fixed map size. Returns (rows, r2, gather_ok) where rows are
    (n, best_ms) and gather_ok verifies the 9*S*N windowed gather count.

    Best-of-repeats with a warmup pass and the garbage collector paused keeps
    allocator noise out of the scaling fit."""
    import gc

    rng = np.random.default_rng(seed)
    cfg = tfm.AttentionConfig(d=d, heads=heads, layers=1, variant=variant)
    if variant == "windowed":
        layer = tfm.WindowedCrossAttention(rng, cfg, "bench")
    else:
        layer = tfm.DeformableCrossAttention(rng, cfg, "bench")
    embedder = tfm.PositionEmbedder(rng, d, "linear",
                                    (0.0, 0.0, 0.4 * map_hw[1], 0.4 * map_hw[0]))
    pyr = _fixed_pyramid(rng, d, map_hw)
    h, w = map_hw

    rows = []
    gather_ok = True
    for n in n_list:
        props = _proposals(rng, n, h, w)
        feats = dg.Value(rng.standard_normal((n, d)))
        positions = np.array([p.world_xy for p in props])
        qs = tfm.QuerySet(feats=feats, positions=positions,
                          pos_embed=embedder(positions), proposals=props)
        layer(qs, pyr, embedder)  # warmup: allocator and BLAS path
        best = np.inf
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(repeats):
                tfm.GATHERS.enabled = True
                tfm.GATHERS.reset()
                t0 = time.perf_counter()
                layer(qs, pyr, embedder)
                best = min(best, time.perf_counter() - t0)
                if variant == "windowed" and tfm.GATHERS.count != 9 * 3 * n:
                    gather_ok = False
                tfm.GATHERS.enabled = False
        finally:
            if gc_was_enabled:
                gc.enable()
        rows.append((n, best * 1e3))
    _, _, r2 = linear_fit_r2([r[0] for r in rows], [r[1] for r in rows])
    return rows, r2, gather_ok


def bench_kernels(n_pairs=(1000, 10000, 50000), seed=0, repeats=3):
    """Compare backends on the pairwise rotated-IoU kernel.

    Returns rows of (n, {backend: ms}). With only the pure backend present the
    comparison degenerates to a single column."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_pairs:
        a = np.column_stack([rng.uniform(-50, 50, n), rng.uniform(-50, 50, n),
                             rng.uniform(1, 5, n), rng.uniform(1, 3, n),
                             rng.uniform(-np.pi, np.pi, n)])
        b = a + rng.normal(0.0, 0.5, a.shape)
        b[:, 2:4] = np.abs(b[:, 2:4]) + 0.5
        timings = {}
        for backend in kernels.available_backends():
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                kernels.iou_pairs(a, b, backend=backend)
                best = min(best, time.perf_counter() - t0)
            timings[backend] = best * 1e3
        rows.append((n, timings))
    return rows
