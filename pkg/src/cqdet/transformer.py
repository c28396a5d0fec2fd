"""Center-query decoder: position embedding, multi-head self-attention,
windowed and deformable multi-scale cross-attention, feed-forward blocks, and
the flattened regression head with IoU prediction.

The windowed gather is laid out as a contiguous (n, keys, d) batch so the
attention core is a dense batched matmul; an instrumented counter tracks the
number of gathered cells (9 per scale per query).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffgrid as dg
from .geom import BoxEncoding, decode_box
from .layers import LayerNorm, Linear, Module
from .cpn import FeaturePyramid


class GatherCounter:
    """Counts windowed-attention cell gathers; enable around a measured run."""

    def __init__(self):
        self.enabled = False
        self.count = 0

    def reset(self):
        self.count = 0

    def add(self, n):
        if self.enabled:
            self.count += int(n)


GATHERS = GatherCounter()


@dataclass(frozen=True)
class AttentionConfig:
    d: int = 64
    heads: int = 4
    layers: int = 3
    variant: str = "windowed"         # windowed | deformable
    window: int = 3
    k_samples: int = 15
    n_scales: int = 3
    frames: int = 1
    query_init: str = "center_feature"  # center_feature | learnable
    pos_embed: str = "linear"           # linear | sinusoidal | none

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.window % 2 == 0:
            raise ValueError("window size must be odd")
        if self.variant not in ("windowed", "deformable"):
            raise ValueError(f"unknown attention variant {self.variant!r}")

    @property
    def head_dim(self):
        return self.d // self.heads


@dataclass
class QuerySet:
    feats: dg.Value          # (n, d)
    positions: np.ndarray    # (n, 2) world meters
    pos_embed: dg.Value      # (n, d)
    proposals: list = field(default_factory=list)

    @property
    def n(self):
        return self.feats.shape[0]

    @property
    def d(self):
        return self.feats.shape[1]

    def with_feats(self, feats: dg.Value) -> "QuerySet":
        return QuerySet(feats=feats, positions=self.positions,
                        pos_embed=self.pos_embed, proposals=self.proposals)


@dataclass
class AttentionTrace:
    """Collected cross-attention weights for offline visualization.

    records: (layer, query, head, frame, scale, row, col, weight) where
    row/col are grid coordinates at that scale (fractional for deformable
    sample positions).
    """

    records: list = field(default_factory=list)

    def add(self, layer, frame, scale, rows, cols, weights, head_offset=0,
            query_offset=0):
        n, heads, j = weights.shape
        for i in range(n):
            for m in range(heads):
                for t in range(j):
                    self.records.append((layer, i + query_offset,
                                         m + head_offset, frame, scale,
                                         float(rows[i, t]), float(cols[i, t]),
                                         float(weights[i, m, t])))


def write_attention_dump(path, trace: AttentionTrace):
    """Newline-delimited: layer query head frame scale row col weight."""
    with open(path, "w", encoding="ascii") as f:
        for rec in trace.records:
            f.write("%d %d %d %d %d %.9g %.9g %.9g\n" % rec)


class PositionEmbedder(Module):
    """Map world (x, y) to a d-vector: learned linear map of coordinates
    normalized into [-1, 1]^2, fixed sinusoidal bands, or zeros."""

    def __init__(self, rng, d, mode, extent, name="pos_embed"):
        self.mode = mode
        self.d = d
        self.extent = extent  # (x0, y0, x1, y1)
        if mode == "linear":
            self.fc = Linear(rng, 2, d, name)
        elif mode not in ("sinusoidal", "none"):
            raise ValueError(f"unknown position embedding mode {mode!r}")

    def _normalize(self, xy):
        x0, y0, x1, y1 = self.extent
        nx = 2.0 * (xy[:, 0] - x0) / (x1 - x0) - 1.0
        ny = 2.0 * (xy[:, 1] - y0) / (y1 - y0) - 1.0
        return np.stack([nx, ny], axis=1)

    def __call__(self, xy: np.ndarray) -> dg.Value:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        if self.mode == "none":
            return dg.Value(np.zeros((len(xy), self.d)))
        norm = self._normalize(xy)
        if self.mode == "linear":
            return self.fc(dg.Value(norm))
        n_bands = self.d // 4
        freqs = math.pi * (2.0 ** np.arange(n_bands))
        emb = np.zeros((len(xy), self.d))
        ang_x = norm[:, :1] * freqs[None, :]
        ang_y = norm[:, 1:] * freqs[None, :]
        emb[:, 0:n_bands] = np.sin(ang_x)
        emb[:, n_bands:2 * n_bands] = np.cos(ang_x)
        emb[:, 2 * n_bands:3 * n_bands] = np.sin(ang_y)
        emb[:, 3 * n_bands:4 * n_bands] = np.cos(ang_y)
        return dg.Value(emb)


def _split_heads(x: dg.Value, heads: int, head_dim: int) -> dg.Value:
    """(n, d) -> (heads, n, head_dim)."""
    n = x.shape[0]
    return dg.transpose(dg.reshape(x, (n, heads, head_dim)), (1, 0, 2))


class SelfAttention(Module):
    """Multi-head self-attention over all queries, residual + layernorm.
    Position embedding enters Q and K but not V."""

    def __init__(self, rng, cfg: AttentionConfig, name):
        d, dh, m = cfg.d, cfg.head_dim, cfg.heads
        self.cfg = cfg
        self.wq = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wq")
        self.wk = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wk")
        self.wv = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wv")
        self.wm = dg.Parameter(rng.normal(0, 1 / math.sqrt(dh), (m, dh, d)), f"{name}.wm")
        self.ln = LayerNorm(d, f"{name}.ln")

    def __call__(self, q: QuerySet) -> QuerySet:
        cfg = self.cfg
        f = q.feats
        qq = dg.add(dg.matmul(f, self.wq), q.pos_embed)
        kk = dg.add(dg.matmul(f, self.wk), q.pos_embed)
        vv = dg.matmul(f, self.wv)
        qh = _split_heads(qq, cfg.heads, cfg.head_dim)
        kh = _split_heads(kk, cfg.heads, cfg.head_dim)
        vh = _split_heads(vv, cfg.heads, cfg.head_dim)
        logits = dg.scale(dg.matmul(qh, dg.transpose(kh, (0, 2, 1))),
                          1.0 / math.sqrt(cfg.head_dim))
        attn = dg.softmax(logits, axis=-1)
        ctx = dg.matmul(attn, vh)                      # (M, n, dh)
        mixed = dg.matmul(ctx, self.wm)                # (M, n, d)
        out = dg.sum_axis(mixed, 0)
        return q.with_feats(self.ln(dg.add(f, out)))


def _window_offsets(window: int) -> np.ndarray:
    r = window // 2
    return np.array([(i, j) for i in range(-r, r + 1) for j in range(-r, r + 1)],
                    dtype=np.int64)


def _gather_window(grid, rows, cols, window):
    """Gather window cells around integer centers with zero padding.

    Returns (feats (n, w*w, d) Value, key_rows, key_cols (n, w*w) ints)."""
    h, w, d = grid.values.shape
    offs = _window_offsets(window)
    kr = rows[:, None] + offs[None, :, 0]
    kc = cols[:, None] + offs[None, :, 1]
    valid = (kr >= 0) & (kr < h) & (kc >= 0) & (kc < w)
    idx = np.clip(kr, 0, h - 1) * w + np.clip(kc, 0, w - 1)
    flat = dg.reshape(grid.values, (h * w, d))
    masked = dg.gather_rows_masked(flat, idx.reshape(-1), valid.reshape(-1))
    GATHERS.add(kr.size)
    return dg.reshape(masked, (len(rows), len(offs), d)), kr, kc


class WindowedCrossAttention(Module):
    """Multi-scale cross-attention over fixed windows around each center.

    Keys carry the query position-embedding map applied to their absolute
    cell positions, plus a learned per-scale embedding; softmax runs jointly
    over all scales' (and frames') keys per head.

    Queries are independent here, so they are processed in fixed-size blocks:
    the gathered (block, keys, d) batch stays cache-resident and the matmul
    core costs the same per query at any N, keeping wall-time linear in N.
    """

    QUERY_BLOCK = 256

    def __init__(self, rng, cfg: AttentionConfig, name):
        d, dh, m = cfg.d, cfg.head_dim, cfg.heads
        self.cfg = cfg
        self.wq = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wq")
        self.wk = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wk")
        self.wv = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (d, d)), f"{name}.wv")
        self.wm = dg.Parameter(rng.normal(0, 1 / math.sqrt(dh), (m, dh, d)), f"{name}.wm")
        self.scale_embed = dg.Parameter(np.zeros((cfg.n_scales, d)), f"{name}.scale_embed")
        self.ln = LayerNorm(d, f"{name}.ln")

    def __call__(self, q: QuerySet, pyr: FeaturePyramid, embedder: PositionEmbedder,
                 prev_pyrs=(), time_embeds=None, trace=None, layer_idx=0) -> QuerySet:
        n = q.n
        block = self.QUERY_BLOCK
        if n <= block:
            return self._forward_block(q, pyr, embedder, prev_pyrs, time_embeds,
                                       trace, layer_idx, 0)
        outs = []
        for start in range(0, n, block):
            stop = min(start + block, n)
            sub = QuerySet(
                feats=dg.narrow(q.feats, 0, start, stop - start),
                positions=q.positions[start:stop],
                pos_embed=dg.narrow(q.pos_embed, 0, start, stop - start),
                proposals=q.proposals[start:stop])
            outs.append(self._forward_block(sub, pyr, embedder, prev_pyrs,
                                            time_embeds, trace, layer_idx,
                                            start).feats)
        return q.with_feats(dg.concat(outs, axis=0))

    def _forward_block(self, q: QuerySet, pyr: FeaturePyramid,
                       embedder: PositionEmbedder, prev_pyrs=(),
                       time_embeds=None, trace=None, layer_idx=0,
                       query_offset=0) -> QuerySet:
        cfg = self.cfg
        n, d = q.n, q.d
        rows = np.array([p.row for p in q.proposals], dtype=np.int64)
        cols = np.array([p.col for p in q.proposals], dtype=np.int64)

        key_parts, val_parts, meta = [], [], []
        for f_idx, pyramid in enumerate((pyr, *prev_pyrs)):
            for s, grid in enumerate(pyramid.scales):
                sr, sc = rows >> s, cols >> s
                feats, kr, kc = _gather_window(grid, sr, sc, cfg.window)
                kpos = grid.cell_to_world(kr.reshape(-1), kc.reshape(-1))
                epos = dg.reshape(embedder(kpos), (n, kr.shape[1], d))
                k_part = dg.add(dg.add(dg.matmul(feats, self.wk), epos),
                                dg.reshape(dg.narrow(self.scale_embed, 0, s, 1), (d,)))
                if time_embeds is not None:
                    k_part = dg.add(k_part, time_embeds[f_idx])
                key_parts.append(k_part)
                val_parts.append(dg.matmul(feats, self.wv))
                meta.append((f_idx, s, kr, kc))

        keys = dg.concat(key_parts, axis=1)    # (n, J, d)
        vals = dg.concat(val_parts, axis=1)
        j_total = keys.shape[1]

        qq = dg.add(dg.matmul(q.feats, self.wq), q.pos_embed)
        qh = dg.reshape(_split_heads(qq, cfg.heads, cfg.head_dim),
                        (cfg.heads, n, 1, cfg.head_dim))
        kh = dg.transpose(dg.reshape(keys, (n, j_total, cfg.heads, cfg.head_dim)),
                          (2, 0, 3, 1))        # (M, n, dh, J)
        vh = dg.transpose(dg.reshape(vals, (n, j_total, cfg.heads, cfg.head_dim)),
                          (2, 0, 1, 3))        # (M, n, J, dh)
        logits = dg.scale(dg.matmul(qh, kh), 1.0 / math.sqrt(cfg.head_dim))
        attn = dg.softmax(logits, axis=-1)     # (M, n, 1, J)
        ctx = dg.reshape(dg.matmul(attn, vh), (cfg.heads, n, cfg.head_dim))
        mixed = dg.matmul(ctx, self.wm)
        out = dg.sum_axis(mixed, 0)

        if trace is not None:
            w_all = attn.data.reshape(cfg.heads, n, j_total).transpose(1, 0, 2)
            j0 = 0
            for f_idx, s, kr, kc in meta:
                jn = kr.shape[1]
                trace.add(layer_idx, f_idx, s, kr.astype(np.float64),
                          kc.astype(np.float64), w_all[:, :, j0:j0 + jn],
                          query_offset=query_offset)
                j0 += jn
        return q.with_feats(self.ln(dg.add(q.feats, out)))


def _ring_bias(heads, n_scales, k_samples):
    """Initial offset-projector bias: a ring of radius one cell so the
    starting samples are dispersed rather than coincident."""
    bias = np.zeros((heads, n_scales, k_samples, 2))
    for m in range(heads):
        for s in range(n_scales):
            for k in range(k_samples):
                ang = 2.0 * math.pi * (k + m / heads + s / (heads * n_scales)) / k_samples
                bias[m, s, k] = (math.sin(ang), math.cos(ang))
    return bias.reshape(-1)


class DeformableCrossAttention(Module):
    """Deformable multi-scale cross-attention: a linear layer learns 2D
    sample offsets (per head, scale, sample; in cell units of each scale) and
    another learns the attention scores directly from the query embedding.
    Samples come from bilinear interpolation, so gradients reach the offsets.
    """

    def __init__(self, rng, cfg: AttentionConfig, name):
        d, m = cfg.d, cfg.heads
        s, k, fr = cfg.n_scales, cfg.k_samples, cfg.frames
        self.cfg = cfg
        self.offset = Linear(rng, d, m * s * k * 2, f"{name}.offset", init="zeros")
        self.offset.b.data[...] = _ring_bias(m, s, k)
        self.attn_proj = Linear(rng, d, m * s * k * fr, f"{name}.attn", bias=False)
        self.wm = dg.Parameter(rng.normal(0, 1 / math.sqrt(d), (m, d, d)), f"{name}.wm")
        self.ln = LayerNorm(d, f"{name}.ln")

    def __call__(self, q: QuerySet, pyr: FeaturePyramid, embedder=None,
                 prev_pyrs=(), time_embeds=None, trace=None, layer_idx=0) -> QuerySet:
        cfg = self.cfg
        n, d = q.n, q.d
        m, s_n, k_n = cfg.heads, cfg.n_scales, cfg.k_samples
        pyramids = (pyr, *prev_pyrs)
        if len(pyramids) != cfg.frames:
            raise ValueError(f"configured for {cfg.frames} frames, got {len(pyramids)}")

        off = dg.reshape(self.offset(q.feats), (n, m, s_n, k_n, 2))
        sample_parts = []
        meta = []
        for f_idx, pyramid in enumerate(pyramids):
            for s, grid in enumerate(pyramid.scales):
                ref = grid.world_to_cell(q.positions)           # (n, 2)
                off_s = dg.reshape(dg.narrow(off, 2, s, 1), (n, m, k_n, 2))
                ref_t = np.broadcast_to(ref[:, None, None, :], (n, m, k_n, 2))
                coords = dg.add(off_s, dg.Value(ref_t.copy()))
                coords_flat = dg.reshape(coords, (n * m * k_n, 2))
                sampled = dg.bilinear_sample(grid.values, coords_flat)
                if time_embeds is not None:
                    sampled = dg.add(sampled, time_embeds[f_idx])
                sample_parts.append(dg.reshape(sampled, (n, m, k_n, d)))
                meta.append((f_idx, s, coords_flat))
        samples = dg.concat(sample_parts, axis=2)               # (n, M, F*S*K, d)
        j_total = samples.shape[2]

        logits = dg.reshape(self.attn_proj(q.feats), (n, m, j_total))
        attn = dg.softmax(logits, axis=-1)
        ctx = dg.reshape(dg.matmul(dg.reshape(attn, (n, m, 1, j_total)), samples),
                         (n, m, d))
        mixed = dg.matmul(dg.transpose(ctx, (1, 0, 2)), self.wm)  # (M, n, d)
        out = dg.sum_axis(mixed, 0)

        if trace is not None:
            w_all = attn.data
            j0 = 0
            for f_idx, s, coords_flat in meta:
                cd = coords_flat.data.reshape(n, m, k_n, 2)
                for head in range(m):
                    trace.add(layer_idx, f_idx, s, cd[:, head, :, 0], cd[:, head, :, 1],
                              w_all[:, head:head + 1, j0:j0 + k_n],
                              head_offset=head)
                j0 += k_n
        return q.with_feats(self.ln(dg.add(q.feats, out)))


class FeedForward(Module):
    def __init__(self, rng, d, name):
        self.fc1 = Linear(rng, d, 2 * d, f"{name}.fc1", init="he")
        self.fc2 = Linear(rng, 2 * d, d, f"{name}.fc2")
        self.ln = LayerNorm(d, f"{name}.ln")

    def __call__(self, q: QuerySet) -> QuerySet:
        h = self.fc2(dg.relu(self.fc1(q.feats)))
        return q.with_feats(self.ln(dg.add(q.feats, h)))


class DecoderBlock(Module):
    def __init__(self, rng, cfg: AttentionConfig, name):
        self.self_attn = SelfAttention(rng, cfg, f"{name}.self")
        if cfg.variant == "windowed":
            self.cross = WindowedCrossAttention(rng, cfg, f"{name}.cross")
        else:
            self.cross = DeformableCrossAttention(rng, cfg, f"{name}.cross")
        self.ffn = FeedForward(rng, cfg.d, f"{name}.ffn")

    def __call__(self, q, pyr, embedder, prev_pyrs=(), time_embeds=None,
                 trace=None, layer_idx=0) -> QuerySet:
        q = self.self_attn(q)
        q = self.cross(q, pyr, embedder, prev_pyrs=prev_pyrs,
                       time_embeds=time_embeds, trace=trace, layer_idx=layer_idx)
        return self.ffn(q)


class Decoder(Module):
    def __init__(self, rng, cfg: AttentionConfig, name="decoder"):
        self.cfg = cfg
        self.blocks = [DecoderBlock(rng, cfg, f"{name}.layer{i}")
                       for i in range(cfg.layers)]

    def __call__(self, q, pyr, embedder, prev_pyrs=(), time_embeds=None,
                 trace=None) -> QuerySet:
        for i, block in enumerate(self.blocks):
            q = block(q, pyr, embedder, prev_pyrs=prev_pyrs,
                      time_embeds=time_embeds, trace=trace, layer_idx=i)
        return q


class RegressionHead(Module):
    """Shared flattened 2-layer head: 8 box-encoding channels + sigmoid IoU.
    Classification is not re-predicted; the class rides with the proposal."""

    def __init__(self, rng, d, name="reg_head"):
        self.fc1 = Linear(rng, d, d, f"{name}.fc1", init="he")
        self.fc2 = Linear(rng, d, 9, f"{name}.fc2")

    def __call__(self, q: QuerySet):
        h = self.fc2(dg.relu(self.fc1(q.feats)))
        enc = dg.narrow(h, 1, 0, 8)
        iou = dg.reshape(dg.sigmoid(dg.narrow(h, 1, 8, 1)), (q.n,))
        return enc, iou


def decode_query_boxes(enc_data: np.ndarray, proposals, cell_size: float, origin):
    """Decode per-query encodings at their proposal cells into Box3D."""
    ox, oy = origin
    boxes = []
    for i, p in enumerate(proposals):
        cell_origin = (ox + p.col * cell_size, oy + p.row * cell_size)
        boxes.append(decode_box(BoxEncoding.from_array(enc_data[i]),
                                cell_origin, cell_size))
    return boxes
