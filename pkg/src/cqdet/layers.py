"""Small learned-layer building blocks over diffgrid values.

Layers own named Parameters; ``Module.named_parameters`` walks attributes
(and lists of sub-modules) so whole models serialize to flat name->array
checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import diffgrid as dg


class Module:
    def named_parameters(self):
        out = {}

        def visit(obj):
            if isinstance(obj, dg.Parameter):
                if obj.name in out and out[obj.name] is not obj:
                    raise ValueError(f"duplicate parameter name {obj.name!r}")
                out[obj.name] = obj
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    visit(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    visit(v)

        visit(self)
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def load_state(self, state: dict, strict: bool = True):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if strict and (missing or extra):
            raise KeyError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} "
                                     f"!= model shape {p.data.shape}")
                p.data[...] = arr


def _init(rng, shape, fan_in, mode):
    if mode == "zeros":
        return np.zeros(shape)
    std = np.sqrt((2.0 if mode == "he" else 1.0) / max(fan_in, 1))
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, name, bias=True, init="xavier"):
        self.w = dg.Parameter(_init(rng, (d_in, d_out), d_in, init), f"{name}.w")
        self.b = dg.Parameter(np.zeros(d_out), f"{name}.b") if bias else None

    def __call__(self, x):
        return dg.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, name, k=3, stride=1, bias=True, init="he"):
        fan_in = k * k * c_in
        self.k = dg.Parameter(_init(rng, (k, k, c_in, c_out), fan_in, init), f"{name}.k")
        self.b = dg.Parameter(np.zeros(c_out), f"{name}.b") if bias else None
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return dg.conv2d(x, self.k, self.b, stride=self.stride, pad=self.pad)


class UpsampleConv(Module):
    """Transpose convolution, kernel 2 stride 2: exact x2 spatial upsample."""

    def __init__(self, rng, c_in, c_out, name, bias=True):
        self.k = dg.Parameter(_init(rng, (2, 2, c_in, c_out), 4 * c_in, "he"), f"{name}.k")
        self.b = dg.Parameter(np.zeros(c_out), f"{name}.b") if bias else None

    def __call__(self, x):
        return dg.upsample_transpose_conv(x, self.k, self.b)


class LayerNorm(Module):
    def __init__(self, d, name):
        self.gain = dg.Parameter(np.ones(d), f"{name}.gain")
        self.bias = dg.Parameter(np.zeros(d), f"{name}.bias")

    def __call__(self, x):
        return dg.layernorm(x, self.gain, self.bias)


class ConvBlock(Module):
    """3x3 conv + relu. Encoder-style blocks run bias-free so that an all-zero
    input region stays exactly zero through the stack."""

    def __init__(self, rng, c_in, c_out, name, stride=1, bias=True):
        self.conv = Conv2d(rng, c_in, c_out, name, k=3, stride=stride, bias=bias)

    def __call__(self, x):
        return dg.relu(self.conv(x))


class MLP2(Module):
    """Two-layer perceptron with relu, the shared head/gate block."""

    def __init__(self, rng, d_in, d_hidden, d_out, name, bias=True):
        self.fc1 = Linear(rng, d_in, d_hidden, f"{name}.fc1", bias=bias, init="he")
        self.fc2 = Linear(rng, d_hidden, d_out, f"{name}.fc2", bias=bias, init="xavier")

    def __call__(self, x):
        return self.fc2(dg.relu(self.fc1(x)))
