"""Guided attention: a deeper pyramid level gates and enriches a shallower one.

Given a shallow map ``c_shallow`` of shape (C/2, 2H, 2W) and a deep map
``c_deep`` of shape (C, H, W)::

    f_up    = conv3x3(up2x(conv1x1(c_deep)))
    f_guide = conv3x3(c_shallow * tanh(f_up) + c_shallow)
    g       = (W_fc @ gmp(f_up)) * f_guide + f_guide + f_up

where ``gmp`` is per-channel global max pooling and the first product in the
last line is a per-channel scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Variable
from .errors import ShapeError
from .nn import Conv2dParams, LinearParams


@dataclass
class GAParams:
    reduce_1x1: Conv2dParams  # C -> C/2
    smooth_up_3x3: Conv2dParams  # C/2 -> C/2
    smooth_guide_3x3: Conv2dParams  # C/2 -> C/2
    w_fc: LinearParams  # C/2 -> C/2, no bias

    def __post_init__(self):
        half = self.reduce_1x1.weight.shape[0]
        if self.reduce_1x1.weight.shape[1] != 2 * half or self.reduce_1x1.kernel != 1:
            raise ShapeError("reduce_1x1 must be a 1x1 conv halving the channel count")
        for conv in (self.smooth_up_3x3, self.smooth_guide_3x3):
            if conv.weight.shape[:3] != (half, half, 3):
                raise ShapeError(f"3x3 smoothing convs must map {half} -> {half} channels")
        if self.w_fc.weight.shape != (half, half) or self.w_fc.bias is not None:
            raise ShapeError(f"w_fc must be a bias-free ({half}, {half}) matrix")

    @property
    def deep_channels(self) -> int:
        return self.reduce_1x1.weight.shape[1]

    def variables(self, prefix: str = "ga") -> dict[str, Variable]:
        out = {}
        out.update(self.reduce_1x1.variables(f"{prefix}.reduce_1x1"))
        out.update(self.smooth_up_3x3.variables(f"{prefix}.smooth_up_3x3"))
        out.update(self.smooth_guide_3x3.variables(f"{prefix}.smooth_guide_3x3"))
        out.update(self.w_fc.variables(f"{prefix}.w_fc"))
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, deep_channels: int, name: str = "ga") -> "GAParams":
        if deep_channels % 2:
            raise ShapeError(f"deep channel count must be even, got {deep_channels}")
        half = deep_channels // 2
        return cls(
            reduce_1x1=nn.init_conv(rng, deep_channels, half, 1, f"{name}.reduce_1x1"),
            smooth_up_3x3=nn.init_conv(rng, half, half, 3, f"{name}.smooth_up_3x3"),
            smooth_guide_3x3=nn.init_conv(rng, half, half, 3, f"{name}.smooth_guide_3x3"),
            w_fc=nn.init_linear(rng, half, half, bias=False, name=f"{name}.w_fc"),
        )


def ga_upsample_path(c_deep, p: GAParams) -> Variable:
    c_deep = ad.constant(c_deep)
    if c_deep.ndim != 3:
        raise ShapeError(f"deep map must be (C, H, W), got {c_deep.shape}")
    if c_deep.shape[0] % 2:
        raise ShapeError(f"deep map channel count must be even, got {c_deep.shape[0]}")
    reduced = nn.conv2d(c_deep, p.reduce_1x1)
    return nn.conv2d(nn.upsample2x(reduced), p.smooth_up_3x3)


def ga_guide(c_shallow, f_up, p: GAParams) -> Variable:
    c_shallow, f_up = ad.constant(c_shallow), ad.constant(f_up)
    if c_shallow.shape != f_up.shape:
        raise ShapeError(f"shallow map {c_shallow.shape} and f_up {f_up.shape} differ")
    attended = ad.add(ad.mul(c_shallow, ad.tanh(f_up)), c_shallow)
    return nn.conv2d(attended, p.smooth_guide_3x3)


def ga_fuse(f_up, f_guide, p: GAParams) -> Variable:
    f_up, f_guide = ad.constant(f_up), ad.constant(f_guide)
    if f_up.shape != f_guide.shape:
        raise ShapeError(f"f_up {f_up.shape} and f_guide {f_guide.shape} differ")
    gate = nn.linear(ad.global_max_pool(f_up), p.w_fc)
    return ad.add_n([ad.mul(f_guide, gate), f_guide, f_up])


def ga_forward(c_shallow, c_deep, p: GAParams) -> Variable:
    c_shallow, c_deep = ad.constant(c_shallow), ad.constant(c_deep)
    if c_deep.ndim != 3 or c_shallow.ndim != 3:
        raise ShapeError("guided attention expects (C, H, W) maps")
    expected = (c_deep.shape[0] // 2, 2 * c_deep.shape[1], 2 * c_deep.shape[2])
    if c_shallow.shape != expected:
        raise ShapeError(f"shallow map must be {expected} for a deep map {c_deep.shape}, got {c_shallow.shape}")
    f_up = ga_upsample_path(c_deep, p)
    return ga_fuse(f_up, ga_guide(c_shallow, f_up, p), p)
