"""Convolution, upsampling and fully connected layers on single (C, H, W) samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Variable
from .errors import ShapeError


@dataclass
class Conv2dParams:
    weight: Variable  # (C_out, C_in, k, k)
    bias: Variable  # (C_out,)

    def __post_init__(self):
        w, b = self.weight.shape, self.bias.shape
        if len(w) != 4 or w[2] != w[3] or w[2] not in (1, 3):
            raise ShapeError(f"conv weight must be (C_out, C_in, k, k) with k in {{1, 3}}, got {w}")
        if b != (w[0],):
            raise ShapeError(f"conv bias shape {b} does not match {w[0]} output channels")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def variables(self, prefix: str) -> dict[str, Variable]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class LinearParams:
    weight: Variable  # (D_out, D_in)
    bias: Variable | None = None  # (D_out,)

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be a matrix, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"linear bias shape {self.bias.shape} does not match {self.weight.shape}")

    def variables(self, prefix: str) -> dict[str, Variable]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, name: str = "conv") -> Conv2dParams:
    w = glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    return Conv2dParams(ad.parameter(w, f"{name}.weight"), ad.parameter(np.zeros(c_out), f"{name}.bias"))


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, name: str = "linear") -> LinearParams:
    w = glorot_uniform(rng, (d_out, d_in), d_in, d_out)
    b = ad.parameter(np.zeros(d_out), f"{name}.bias") if bias else None
    return LinearParams(ad.parameter(w, f"{name}.weight"), b)


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :h_out, :w_out]
    # (C, Ho, Wo, k, k) -> (C*k*k, Ho*Wo), rows ordered (c, a, b) like the weight
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, h_out * w_out)


def conv2d(x, p: Conv2dParams, stride: int = 1) -> Variable:
    """Zero-padded ('same' for stride 1) 2-D convolution of a (C_in, H, W) map.

    Padding is 0 for 1x1 kernels and 1 for 3x3 kernels; with ``stride=2`` the
    output is (C_out, ceil(H/2), ceil(W/2)).
    """
    x = ad.constant(x)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a (C, H, W) map, got shape {x.shape}")
    w, b = p.weight, p.bias
    c_out, c_in, k, _ = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    pad = k // 2
    _, h, wd = x.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad))) if pad else x.value
    cols = _im2col(xp, k, stride, h_out, w_out)
    wm = w.value.reshape(c_out, -1)
    out = (wm @ cols + b.value[:, None]).reshape(c_out, h_out, w_out)

    def back(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gb = gm.sum(axis=1)
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c_in, k, k, h_out, w_out)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for c in range(k):
                    gxp[:, a : a + stride * h_out : stride, c : c + stride * w_out : stride] += dcols[:, a, c]
            gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    return ad._make(out, (x, w, b), back)


def upsample2x(x) -> Variable:
    """Nearest-neighbour 2x upsampling: ``out[c, 2h+a, 2w+b] = x[c, h, w]``."""
    x = ad.constant(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample2x expects a (C, H, W) map, got shape {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)
    return ad._make(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def downsample2x_mean(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling (non-differentiable helper)."""
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def linear(x, p: LinearParams) -> Variable:
    """``W x + b`` for a vector ``x``; ``x`` may also be (D_in, N) columns."""
    x = ad.constant(x)
    if x.shape[0] != p.weight.shape[1]:
        raise ShapeError(f"linear: input length {x.shape[0]} does not match weight {p.weight.shape}")
    if x.ndim == 1:
        y = ad.einsum("oi,i->o", p.weight, x)
        return y if p.bias is None else ad.add(y, p.bias)
    if x.ndim != 2:
        raise ShapeError("linear expects a vector or a (D_in, N) matrix")
    y = ad.einsum("oi,in->on", p.weight, x)
    if p.bias is None:
        return y
    # per-row bias over N columns: reuse channel broadcast on a (D, N, 1) view
    y3 = ad.reshape(y, (y.shape[0], y.shape[1], 1))
    return ad.reshape(ad.add(y3, p.bias), y.shape)
