"""Multi-frame machinery: BEV warping into current coordinates, spatial-aware
fusion ahead of the center head, learned time embeddings, and the online
memory bank of previous-frame BEV features.

Cross-frame attending keys are assembled by the decoder's cross-attention
layers from the warped previous pyramids produced here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffgrid as dg
from .layers import Conv2d, Module
from .scenes import BevGrid, Pose


def warp_bev(prev: BevGrid, prev_pose: Pose, cur_pose: Pose) -> BevGrid:
    """Resample a previous-frame BEV grid into current-frame coordinates.

    Inverse mapping: each output cell center is carried from the current ego
    frame into the previous ego frame and bilinearly sampled (zero padding
    outside). Differentiable w.r.t. the previous features.
    """
    h, w, _ = prev.values.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cur_xy = prev.cell_to_world(rows.ravel(), cols.ravel())
    rel = prev_pose.inverse().compose(cur_pose)
    prev_xy = rel.apply(cur_xy)
    coords = prev.world_to_cell(prev_xy)
    sampled = dg.bilinear_sample(prev.values, dg.Value(coords))
    return BevGrid(dg.reshape(sampled, prev.values.shape), prev.cell_size, prev.origin)


class TimeEmbedding(Module):
    """One learned d-vector per integer frame lag; slot 0 is the current frame."""

    def __init__(self, n_slots, d, name="time_embed"):
        self.table = dg.Parameter(np.zeros((n_slots, d)), f"{name}.table")

    def slot(self, lag: int) -> dg.Value:
        return dg.reshape(dg.narrow(self.table, 0, lag, 1), (self.table.shape[1],))

    def slots(self, n: int):
        return [self.slot(i) for i in range(n)]


class SpatialAwareFusion(Module):
    """Gate warped previous BEV grids by spatial attention computed from the
    current grid, add per-frame time embeddings, concatenate, and fuse back
    to the original channel count with a 3x3 conv.

    The fuse conv starts as an identity pass-through of the current block
    plus small noise: the fused pipeline then begins as the single-frame
    pipeline and grows into the fusion, instead of scrambling the center
    head's input at initialization."""

    def __init__(self, rng, c, n_frames, time_embed: TimeEmbedding, name="saf"):
        self.attn = Conv2d(rng, 2, 1, f"{name}.attn", k=7)
        self.fuse = Conv2d(rng, c * n_frames, c, f"{name}.fuse", k=3)
        self.fuse.k.data *= 0.1
        for ch in range(c):
            self.fuse.k.data[1, 1, ch, ch] += 1.0
        self.time_embed = time_embed
        self.n_frames = n_frames

    def attention_map(self, cur: dg.Value) -> dg.Value:
        stats = dg.concat([dg.channel_mean(cur), dg.channel_max(cur)], axis=2)
        return dg.sigmoid(self.attn(stats))

    def __call__(self, cur: BevGrid, prevs) -> BevGrid:
        if len(prevs) + 1 != self.n_frames:
            raise ValueError(f"fusion configured for {self.n_frames} frames, "
                             f"got {len(prevs) + 1}")
        for p in prevs:
            if p.values.shape != cur.values.shape:
                raise ValueError("fused grids must share dimensions")
        gate = self.attention_map(cur.values)
        blocks = [dg.add(cur.values, self.time_embed.slot(0))]
        for lag, p in enumerate(prevs, start=1):
            gated = dg.scale_spatial(p.values, gate)
            blocks.append(dg.add(gated, self.time_embed.slot(lag)))
        fused = self.fuse(dg.concat(blocks, axis=2))
        return BevGrid(fused, cur.cell_size, cur.origin)


# ---------------------------------------------------------------------------
# memory bank


@dataclass
class BankEntry:
    bev: np.ndarray       # (h, w, c) stored feature data
    cell_size: float
    origin: tuple
    pose: Pose
    timestamp: float


@dataclass
class MemoryBank:
    """FIFO ring of previous-frame BEV features for online inference."""

    capacity: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory bank capacity must be >= 1")

    def push(self, grid: BevGrid, pose: Pose, timestamp: float):
        self.entries.append(BankEntry(grid.array.copy(), grid.cell_size,
                                      tuple(grid.origin), pose, timestamp))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def peek(self, n: int):
        """Most recent n entries, newest first (lag 1, then lag 2, ...).
        An empty bank yields an empty view: single-frame fallback."""
        return list(reversed(self.entries[-n:])) if n > 0 else []

    def __len__(self):
        return len(self.entries)

    def as_grid(self, entry: BankEntry) -> BevGrid:
        return BevGrid(dg.Value(entry.bev), entry.cell_size, entry.origin)


_BANK_MAGIC = b"CQMB"


def save_bank(path, bank: MemoryBank):
    with open(path, "wb") as f:
        f.write(_BANK_MAGIC)
        f.write(struct.pack("<II", bank.capacity, len(bank.entries)))
        for e in bank.entries:
            h, w, c = e.bev.shape
            f.write(struct.pack("<III", h, w, c))
            f.write(struct.pack("<d", e.cell_size))
            f.write(struct.pack("<2d", *e.origin))
            f.write(struct.pack("<3d", e.pose.tx, e.pose.ty, e.pose.heading))
            f.write(struct.pack("<d", e.timestamp))
            f.write(np.ascontiguousarray(e.bev, dtype="<f8").tobytes())


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as f:
        if f.read(4) != _BANK_MAGIC:
            raise ValueError(f"{path}: not a memory-bank snapshot (bad magic)")
        capacity, count = struct.unpack("<II", f.read(8))
        bank = MemoryBank(capacity=capacity)
        for _ in range(count):
            h, w, c = struct.unpack("<III", f.read(12))
            (cell,) = struct.unpack("<d", f.read(8))
            origin = struct.unpack("<2d", f.read(16))
            tx, ty, heading = struct.unpack("<3d", f.read(24))
            (ts,) = struct.unpack("<d", f.read(8))
            bev = np.frombuffer(f.read(8 * h * w * c), dtype="<f8").reshape(h, w, c)
            bank.entries.append(BankEntry(bev.astype(np.float64).copy(), cell,
                                          origin, Pose(tx, ty, heading), ts))
    return bank
