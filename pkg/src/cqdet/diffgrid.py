"""Reverse-mode differentiable operations over dense f64 grids.

A ``Tape`` records every operation executed while it is active; ``backward``
replays the records in exact reverse order, accumulating gradients into the
participating values. All storage is dense, row-major float64. There is no
broadcasting beyond bias-style trailing-shape addition and scalar scaling;
shape mismatches are rejected eagerly.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

_EPS_LN = 1e-5  # layernorm variance floor

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Value:
    """A dense f64 array plus room for an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Value(self.data.copy())

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Value):
    """A named learnable Value whose gradient persists across backward calls."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward.

    Use as a context manager around the forward pass. Each record is consumed
    exactly once: after ``backward`` the tape is empty.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, root: Value):
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar Value")
        root.accum_grad(np.ones_like(root.data))
        records, self._records = self._records, []
        for out, fn in reversed(records):
            if out.grad is not None:
                fn(out.grad)


def record(out: Value, inputs, backward_fn):
    """Attach a backward closure to the active tape, if recording applies.

    ``backward_fn(g)`` receives the output gradient and must accumulate into
    the inputs via ``Value.accum_grad``. Exposed so sibling modules can define
    fused operations with hand-derived backward passes.
    """
    tape = _active_tape()
    if tape is None:
        return out
    if any(isinstance(v, Value) and v.requires_grad for v in inputs):
        out.requires_grad = True
        tape._records.append((out, backward_fn))
    return out


def _as_value(x):
    return x if isinstance(x, Value) else Value(x)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Value, b: Value) -> Value:
    """Elementwise add; also accepts a trailing-shape bias on the right."""
    a, b = _as_value(a), _as_value(b)
    if a.shape != b.shape:
        if b.data.ndim >= a.data.ndim or a.shape[a.data.ndim - b.data.ndim:] != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Value(a.data + b.data)
    lead = tuple(range(a.data.ndim - b.data.ndim))

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(g.sum(axis=lead) if lead else g)

    return record(out, (a, b), backward)


def sub(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    out = Value(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(-g)

    return record(out, (a, b), backward)


def mul(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Value(a.data * b.data)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g * bd)
        if b.requires_grad:
            b.accum_grad(g * ad)

    return record(out, (a, b), backward)


def scale(x: Value, s: float) -> Value:
    x = _as_value(x)
    s = float(s)
    out = Value(x.data * s)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * s)

    return record(out, (x,), backward)


def relu(x: Value) -> Value:
    x = _as_value(x)
    out = Value(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * mask)

    return record(out, (x,), backward)


def sigmoid(x: Value) -> Value:
    x = _as_value(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Value(y)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * y * (1.0 - y))

    return record(out, (x,), backward)


def exp(x: Value) -> Value:
    x = _as_value(x)
    y = np.exp(x.data)
    out = Value(y)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * y)

    return record(out, (x,), backward)


def log(x: Value) -> Value:
    x = _as_value(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log of non-positive value")
    out = Value(np.log(x.data))
    xd = x.data

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g / xd)

    return record(out, (x,), backward)


def clamp(x: Value, lo: float, hi: float) -> Value:
    """Clamp with straight-through gradient inside the interval."""
    x = _as_value(x)
    out = Value(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * inside)

    return record(out, (x,), backward)


def concat(values, axis: int) -> Value:
    values = [_as_value(v) for v in values]
    out = Value(np.concatenate([v.data for v in values], axis=axis))
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for v, piece in zip(values, pieces):
            if v.requires_grad:
                v.accum_grad(piece)

    return record(out, values, backward)


def narrow(x: Value, axis: int, start: int, length: int) -> Value:
    """Contiguous slice along one axis."""
    x = _as_value(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Value(x.data[idx].copy())

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accum_grad(full)

    return record(out, (x,), backward)


def reshape(x: Value, shape) -> Value:
    x = _as_value(x)
    out = Value(x.data.reshape(shape))
    orig = x.shape

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g.reshape(orig))

    return record(out, (x,), backward)


def transpose(x: Value, axes) -> Value:
    x = _as_value(x)
    axes = tuple(axes)
    out = Value(np.ascontiguousarray(x.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g.transpose(inv))

    return record(out, (x,), backward)


def gather_rows(x: Value, idx) -> Value:
    """Select rows along axis 0; backward scatter-adds."""
    x = _as_value(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Value(x.data[idx])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x.accum_grad(full)

    return record(out, (x, ), backward)


def gather_rows_masked(x: Value, idx, valid) -> Value:
    """Row gather with a validity mask: invalid rows come out zero (the
    zero-padding gather used by windowed attention). Fused so no full-size
    mask tensor is materialized."""
    x = _as_value(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    data = x.data[idx]
    data[~valid] = 0.0
    out = Value(data)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx[valid], g[valid])
            x.accum_grad(full)

    return record(out, (x,), backward)


def embed2d(x: Value, out_hw, offset) -> Value:
    """Place an (h,w,c) block into a zero canvas of (H,W,c) at (row, col)."""
    x = _as_value(x)
    h, w, c = x.shape
    hh, ww = out_hw
    r0, c0 = offset
    if r0 < 0 or c0 < 0 or r0 + h > hh or c0 + w > ww:
        raise ValueError("embed2d block out of canvas bounds")
    canvas = np.zeros((hh, ww, c), dtype=np.float64)
    canvas[r0:r0 + h, c0:c0 + w] = x.data
    out = Value(canvas)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g[r0:r0 + h, c0:c0 + w])

    return record(out, (x,), backward)


def sum_axis(x: Value, axis: int) -> Value:
    """Sum over one axis (no keepdims)."""
    x = _as_value(x)
    axis = axis % x.data.ndim
    out = Value(x.data.sum(axis=axis))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return record(out, (x,), backward)


def sum_all(x: Value) -> Value:
    x = _as_value(x)
    out = Value(np.array(x.data.sum()))
    shp = x.shape

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.full(shp, float(g)))

    return record(out, (x,), backward)


def mean_all(x: Value) -> Value:
    return scale(sum_all(x), 1.0 / max(x.size, 1))


# ---------------------------------------------------------------------------
# dense linear algebra


def matmul(a: Value, b: Value) -> Value:
    """Matrix product; batched when both operands share leading dims."""
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires ndim >= 2")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    out = Value(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.accum_grad(np.matmul(g, bd.swapaxes(-1, -2)))
        if b.requires_grad:
            if bd.ndim == 2:
                gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(ad.swapaxes(-1, -2), g)
            b.accum_grad(gb)

    return record(out, (a, b), backward)


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    """y = x @ w (+ b) for 2D x."""
    x, w = _as_value(x), _as_value(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch {x.shape} @ {w.shape}")
    y = x.data @ w.data
    if b is not None:
        b = _as_value(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data
    out = Value(y)
    xd, wd = x.data, w.data

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g @ wd.T)
        if w.requires_grad:
            w.accum_grad(xd.T @ g)
        if b is not None and b.requires_grad:
            b.accum_grad(g.sum(axis=0))

    return record(out, (x, w) if b is None else (x, w, b), backward)


def conv2d(x: Value, k: Value, b: Value | None = None, stride: int = 1, pad: int = 0) -> Value:
    """2D convolution on (h,w,cin) with kernel (k,k,cin,cout), zero padding.

    Computed as a sum over the k*k kernel taps of strided-view matmuls, which
    keeps peak memory at one (ho*wo, cin) buffer instead of a full im2col.
    """
    x, k = _as_value(x), _as_value(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ValueError("conv2d expects x (h,w,cin) and kernel (k,k,cin,cout)")
    kh, kw, cin, cout = k.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d kernel must be square with odd size")
    if x.shape[2] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[2]}, kernel {cin}")
    if stride not in (1, 2):
        raise ValueError("conv2d stride must be 1 or 2")
    h, w, _ = x.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError("conv2d kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    y = np.zeros((ho * wo, cout), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            view = xp[ki:ki + (ho - 1) * stride + 1:stride,
                      kj:kj + (wo - 1) * stride + 1:stride]
            y += view.reshape(-1, cin) @ k.data[ki, kj]
    if b is not None:
        b = _as_value(b)
        if b.shape != (cout,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({cout},)")
        y += b.data
    out = Value(y.reshape(ho, wo, cout))

    def backward(g):
        g2 = g.reshape(-1, cout)
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        for ki in range(kh):
            for kj in range(kw):
                view = xp[ki:ki + (ho - 1) * stride + 1:stride,
                          kj:kj + (wo - 1) * stride + 1:stride]
                if k.requires_grad:
                    if k.grad is None:
                        k.grad = np.zeros_like(k.data)
                    k.grad[ki, kj] += view.reshape(-1, cin).T @ g2
                if need_dx:
                    dxp[ki:ki + (ho - 1) * stride + 1:stride,
                        kj:kj + (wo - 1) * stride + 1:stride] += (
                            g2 @ k.data[ki, kj].T).reshape(ho, wo, cin)
        if need_dx:
            x.accum_grad(dxp[pad:pad + h, pad:pad + w] if pad else dxp)
        if b is not None and b.requires_grad:
            b.accum_grad(g2.sum(axis=0))

    return record(out, (x, k) if b is None else (x, k, b), backward)


def upsample_transpose_conv(x: Value, k: Value, b: Value | None = None) -> Value:
    """Exact x2 upsampling transpose convolution (kernel 2, stride 2)."""
    x, k = _as_value(x), _as_value(k)
    if k.shape[:2] != (2, 2):
        raise ValueError("upsample kernel must be (2,2,cin,cout)")
    h, w, cin = x.shape
    _, _, kcin, cout = k.shape
    if cin != kcin:
        raise ValueError(f"upsample channel mismatch: input {cin}, kernel {kcin}")
    y = np.empty((2 * h, 2 * w, cout), dtype=np.float64)
    flat = x.data.reshape(-1, cin)
    for ki in range(2):
        for kj in range(2):
            y[ki::2, kj::2] = (flat @ k.data[ki, kj]).reshape(h, w, cout)
    if b is not None:
        b = _as_value(b)
        y += b.data
    out = Value(y)

    def backward(g):
        for ki in range(2):
            for kj in range(2):
                gtap = g[ki::2, kj::2].reshape(-1, cout)
                if k.requires_grad:
                    if k.grad is None:
                        k.grad = np.zeros_like(k.data)
                    k.grad[ki, kj] += flat.T @ gtap
                if x.requires_grad:
                    x.accum_grad((gtap @ k.data[ki, kj].T).reshape(h, w, cin))
        if b is not None and b.requires_grad:
            b.accum_grad(g.sum(axis=(0, 1)))

    return record(out, (x, k) if b is None else (x, k, b), backward)


def maxpool2d(x: Value, k: int = 3, stride: int = 1) -> Value:
    """Same-size max pooling; border windows take the max of valid cells only."""
    x = _as_value(x)
    if stride != 1:
        raise ValueError("maxpool2d supports stride 1 only")
    h, w, c = x.shape
    p = k // 2
    xp = np.full((h + 2 * p, w + 2 * p, c), -np.inf)
    xp[p:p + h, p:p + w] = x.data
    best = np.full((h, w, c), -np.inf)
    best_tap = np.zeros((h, w, c), dtype=np.int8)
    for t, (ki, kj) in enumerate((i, j) for i in range(k) for j in range(k)):
        view = xp[ki:ki + h, kj:kj + w]
        better = view > best
        best = np.where(better, view, best)
        best_tap = np.where(better, np.int8(t), best_tap)
    out = Value(best)

    def backward(g):
        if not x.requires_grad:
            return
        dxp = np.zeros((h + 2 * p, w + 2 * p, c))
        for t, (ki, kj) in enumerate((i, j) for i in range(k) for j in range(k)):
            mask = best_tap == t
            dxp[ki:ki + h, kj:kj + w] += np.where(mask, g, 0.0)
        x.accum_grad(dxp[p:p + h, p:p + w])

    return record(out, (x,), backward)


def avgpool_global(x: Value) -> Value:
    """(h,w,c) -> (c,) mean over space."""
    x = _as_value(x)
    h, w, c = x.shape
    out = Value(x.data.mean(axis=(0, 1)))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.broadcast_to(g / (h * w), (h, w, c)).copy())

    return record(out, (x,), backward)


def maxpool_global(x: Value) -> Value:
    """(h,w,c) -> (c,) max over space; ties route to the first cell."""
    x = _as_value(x)
    h, w, c = x.shape
    flat = x.data.reshape(-1, c)
    arg = flat.argmax(axis=0)
    out = Value(flat[arg, np.arange(c)])

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(flat)
            dx[arg, np.arange(c)] = g
            x.accum_grad(dx.reshape(h, w, c))

    return record(out, (x,), backward)


def channel_mean(x: Value) -> Value:
    """(h,w,c) -> (h,w,1) mean over channels."""
    x = _as_value(x)
    c = x.shape[2]
    out = Value(x.data.mean(axis=2, keepdims=True))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.repeat(g / c, c, axis=2))

    return record(out, (x,), backward)


def channel_max(x: Value) -> Value:
    """(h,w,c) -> (h,w,1) max over channels; ties route to the first channel."""
    x = _as_value(x)
    arg = x.data.argmax(axis=2)
    out = Value(np.take_along_axis(x.data, arg[..., None], axis=2))

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, arg[..., None], g, axis=2)
            x.accum_grad(dx)

    return record(out, (x,), backward)


def scale_channels(x: Value, s: Value) -> Value:
    """Multiply (h,w,c) by a per-channel gate (c,)."""
    x, s = _as_value(x), _as_value(s)
    if s.shape != (x.shape[2],):
        raise ValueError(f"scale_channels gate shape {s.shape} != ({x.shape[2]},)")
    out = Value(x.data * s.data)
    xd, sd = x.data, s.data

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * sd)
        if s.requires_grad:
            s.accum_grad((g * xd).sum(axis=(0, 1)))

    return record(out, (x, s), backward)


def scale_spatial(x: Value, m: Value) -> Value:
    """Multiply (h,w,c) by a per-cell gate (h,w,1)."""
    x, m = _as_value(x), _as_value(m)
    if m.shape != (x.shape[0], x.shape[1], 1):
        raise ValueError(f"scale_spatial gate shape {m.shape} != {(x.shape[0], x.shape[1], 1)}")
    out = Value(x.data * m.data)
    xd, md = x.data, m.data

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * md)
        if m.requires_grad:
            m.accum_grad((g * xd).sum(axis=2, keepdims=True))

    return record(out, (x, m), backward)


# ---------------------------------------------------------------------------
# normalization / attention primitives


def softmax(x: Value, axis: int = -1) -> Value:
    x = _as_value(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Value(y)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x.accum_grad((g - dot) * y)

    return record(out, (x,), backward)


def layernorm(x: Value, gain: Value, bias: Value) -> Value:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_value(x), _as_value(gain), _as_value(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layernorm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_LN)
    xhat = xc * inv
    out = Value(xhat * gain.data + bias.data)
    gd = gain.data

    def backward(g):
        if gain.requires_grad:
            gain.accum_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accum_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accum_grad(inv * (dxhat - m1 - xhat * m2))

    return record(out, (x, gain, bias), backward)


def bilinear_sample(x: Value, coords: Value) -> Value:
    """Sample (h,w,c) at fractional (row, col) positions, zero-padded borders.

    Cell centers sit at integer coordinates. Gradients flow to both the grid
    and the coordinates (the analytic bilinear derivative; discontinuous on
    the integer lattice lines, like the interpolant itself).
    """
    x, coords = _as_value(x), _as_value(coords)
    if coords.data.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must be (n,2)")
    h, w, c = x.shape
    r = coords.data[:, 0]
    q = coords.data[:, 1]
    r0 = np.floor(r).astype(np.int64)
    q0 = np.floor(q).astype(np.int64)
    fr = r - r0
    fq = q - q0

    corners = []
    for dr, dq in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, qi = r0 + dr, q0 + dq
        valid = (ri >= 0) & (ri < h) & (qi >= 0) & (qi < w)
        rc = np.clip(ri, 0, h - 1)
        qc = np.clip(qi, 0, w - 1)
        feat = x.data[rc, qc] * valid[:, None]
        wgt = (fr if dr else 1.0 - fr) * (fq if dq else 1.0 - fq)
        corners.append((rc, qc, valid, feat, wgt, dr, dq))
    y = np.zeros((coords.shape[0], c), dtype=np.float64)
    for _, _, _, feat, wgt, _, _ in corners:
        y += feat * wgt[:, None]
    out = Value(y)

    def backward(g):
        if x.requires_grad:
            dx = np.zeros(h * w * c, dtype=np.float64)
            ch = np.arange(c, dtype=np.int64)
            for rc, qc, valid, _, wgt, _, _ in corners:
                contrib = g * (wgt * valid)[:, None]
                flat_idx = ((rc * w + qc)[:, None] * c + ch[None, :]).ravel()
                dx += np.bincount(flat_idx, weights=contrib.ravel(), minlength=h * w * c)
            x.accum_grad(dx.reshape(h, w, c))
        if coords.requires_grad:
            gdot = {}
            for _, _, _, feat, _, dr, dq in corners:
                gdot[(dr, dq)] = (g * feat).sum(axis=1)
            dr_ = ((gdot[(1, 0)] - gdot[(0, 0)]) * (1.0 - fq)
                   + (gdot[(1, 1)] - gdot[(0, 1)]) * fq)
            dq_ = ((gdot[(0, 1)] - gdot[(0, 0)]) * (1.0 - fr)
                   + (gdot[(1, 1)] - gdot[(1, 0)]) * fr)
            coords.accum_grad(np.stack([dr_, dq_], axis=1))

    return record(out, (x, coords), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)

    @property
    def ok(self):
        return bool(self.max_rel_err < self.tol)

    def __str__(self):
        status = "pass" if self.ok else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def grad_check(fn, inputs, tol: float = 1e-4, step: float = 1e-6, seed: int = 0,
               max_elements: int | None = None) -> GradReport:
    """Compare reverse-mode gradients of fn(*inputs) against central differences.

    ``fn`` must be a pure function of the given Values returning a Value. A
    fixed random projection reduces non-scalar outputs to a scalar loss.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    ``max_elements`` caps the finite-differenced elements per input (sampled
    with the given seed), which keeps deep-composite checks affordable.
    """
    rng = np.random.default_rng(seed)
    for v in inputs:
        v.grad = np.zeros_like(v.data) if isinstance(v, Parameter) else None

    probe = None

    def loss_of(out_data):
        return float((out_data * probe).sum())

    with Tape() as tape:
        out = fn(*inputs)
        probe = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        loss = sum_all(mul(out, Value(probe))) if out.size > 1 else out
    tape.backward(loss)

    max_err = 0.0
    per_input = []
    for v in inputs:
        if not v.requires_grad:
            continue
        analytic = (v.grad if v.grad is not None else np.zeros_like(v.data)).ravel()
        flat = v.data.ravel()
        if max_elements is not None and flat.size > max_elements:
            elems = rng.choice(flat.size, size=max_elements, replace=False)
        else:
            elems = np.arange(flat.size)
        err = 0.0
        for i in elems:
            keep = flat[i]
            flat[i] = keep + step
            hi = loss_of(fn(*inputs).data)
            flat[i] = keep - step
            lo = loss_of(fn(*inputs).data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            err = max(err, abs(analytic[i] - numeric) / denom)
        per_input.append(err)
        max_err = max(max_err, err)
    return GradReport(max_rel_err=max_err, tol=tol, per_input=per_input)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CQCK"


def save_checkpoint(path, params: dict):
    """Serialize named arrays (Parameters or plain ndarrays): CQCK header,
    count, then per-entry (name length u32, name bytes, rank u32, dims u64...,
    f64 data), little-endian."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(params)))
        for name in sorted(params):
            p = params[name]
            data = np.asarray(p.data if isinstance(p, Value) else p, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into a {name: ndarray} dict."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (count,) = struct.unpack("<Q", f.read(8))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64).copy()
    return out
