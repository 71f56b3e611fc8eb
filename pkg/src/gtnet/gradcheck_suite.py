"""Finite-difference checks for every differentiable operation.

Each case builds a scalar objective from random inputs; inputs that can
carry gradients are all registered as parameters.  Objectives are weighted
sums with fixed random weights so that no gradient entry is trivially
symmetric; the two attention composites are additionally checked on a plain
sum of their outputs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .guided_attention import GAParams, ga_forward, ga_fuse, ga_guide, ga_upsample_path
from .pipeline import losses as L
from .pipeline.config import ModelConfig
from .pipeline.model import Detector, backbone_stub, fpn_lite
from .tucker import (
    TBAParams,
    bilinear_full,
    bilinear_fuse,
    bilinear_fuse_columns,
    l1_core_penalty,
    self_attention_gate,
    tba_forward,
    tucker_reconstruct,
)

EPS = 1e-5
TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3  # end-to-end tiny detector


def _p(rng, *shape, name=None):
    return ad.parameter(rng.normal(size=shape), name)


def _wsum(rng, fn):
    """Objective ``sum(w * fn())`` with weights drawn once."""
    cache = {}

    def f():
        out = fn()
        if "w" not in cache:
            cache["w"] = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
        return ad.weighted_sum(out, cache["w"])

    return f


def _conv_params(p: nn.Conv2dParams):
    return [p.weight, p.bias]


def _ga_params(ga: GAParams):
    return list(ga.variables().values())


def _jitter(rng, params):
    # move every bias/weight off zero so no entry sits on a kink or a symmetric point
    for v in params:
        v.value = v.value + rng.normal(scale=0.1, size=v.shape)


def _binary(op, shape_b=None):
    def make(rng):
        a = _p(rng, 2, 3, 3)
        b = _p(rng, *(shape_b or (2, 3, 3)))
        return _wsum(rng, lambda: op(a, b)), [a, b]

    return make


def _unary(op, shape=(2, 3, 4)):
    def make(rng):
        a = _p(rng, *shape)
        return _wsum(rng, lambda: op(a)), [a]

    return make


def _case_add_n(rng):
    terms = [_p(rng, 2, 3, 3) for _ in range(3)]
    return _wsum(rng, lambda: ad.add_n(terms)), terms


def _case_weighted_sum(rng):
    a = _p(rng, 2, 3, 4)
    w = rng.normal(size=a.shape)
    return (lambda: ad.weighted_sum(a, w)), [a]


def _case_mode_product(rng):
    t = _p(rng, 2, 3, 4)
    m = _p(rng, 5, 3)
    return _wsum(rng, lambda: ad.mode_n_product(t, m, 1)), [t, m]


def _case_einsum(rng):
    a = _p(rng, 3, 4)
    b = _p(rng, 4, 2, 5)
    return _wsum(rng, lambda: ad.einsum("ij,jkl->ik", a, b)), [a, b]


def _case_conv(k, stride=1):
    def make(rng):
        x = _p(rng, 3, 6, 6)
        p = nn.init_conv(rng, 3, 4, k)
        _jitter(rng, [p.bias])
        return _wsum(rng, lambda: nn.conv2d(x, p, stride=stride)), [x] + _conv_params(p)

    return make


def _case_linear(cols: bool):
    def make(rng):
        x = _p(rng, 4, 3) if cols else _p(rng, 4)
        p = nn.init_linear(rng, 4, 5)
        _jitter(rng, [p.bias])
        return _wsum(rng, lambda: nn.linear(x, p)), [x, p.weight, p.bias]

    return make


def _ga_setup(rng, c=4, h=3):
    ga = GAParams.init(rng, c)
    _jitter(rng, _ga_params(ga))
    deep = _p(rng, c, h, h)
    shallow = _p(rng, c // 2, 2 * h, 2 * h)
    return ga, deep, shallow


def _case_ga_up(rng):
    ga, deep, _ = _ga_setup(rng)
    params = [deep] + [v for k, v in ga.variables().items() if "reduce" in k or "smooth_up" in k]
    return _wsum(rng, lambda: ga_upsample_path(deep, ga)), params


def _case_ga_guide(rng):
    ga, _, shallow = _ga_setup(rng)
    f_up = _p(rng, *shallow.shape)
    return _wsum(rng, lambda: ga_guide(shallow, f_up, ga)), [shallow, f_up] + _conv_params(ga.smooth_guide_3x3)


def _case_ga_fuse(rng):
    ga, _, shallow = _ga_setup(rng)
    f_up = _p(rng, *shallow.shape)
    f_guide = _p(rng, *shallow.shape)
    return _wsum(rng, lambda: ga_fuse(f_up, f_guide, ga)), [f_up, f_guide, ga.w_fc.weight]


def _case_ga_forward(plain_sum: bool):
    def make(rng):
        ga, deep, shallow = _ga_setup(rng)
        fn = lambda: ga_forward(shallow, deep, ga)  # noqa: E731
        f = (lambda: ad.sum(fn())) if plain_sum else _wsum(rng, fn)
        return f, [shallow, deep] + _ga_params(ga)

    return make


def _tba_setup(rng, c=4, ranks=(2, 3, 2), k_cat=3, k_out=3):
    p = TBAParams.init(rng, c, c, ranks, k_cat, k_out=k_out, channels=c, l1_weight=0.1)
    _jitter(rng, list(p.variables().values()))
    return p


def _tba_vars(p: TBAParams):
    return list(p.variables().values())


def _case_bilinear_full(rng):
    q, v, g = _p(rng, 3), _p(rng, 4), _p(rng, 3, 4, 2)
    return _wsum(rng, lambda: bilinear_full(q, v, g)), [q, v, g]


def _case_reconstruct(rng):
    p = _tba_setup(rng)
    return _wsum(rng, lambda: tucker_reconstruct(p)), [p.core.gamma_c, p.w_q, p.w_v, p.w_o]


def _case_fuse(rng):
    p = _tba_setup(rng)
    q, v = _p(rng, 4), _p(rng, 4)
    return _wsum(rng, lambda: bilinear_fuse(q, v, p)), [q, v, p.core.gamma_c, p.w_q, p.w_v, p.w_o]


def _case_fuse_columns(rng):
    p = _tba_setup(rng)
    q, v = _p(rng, 4, 5), _p(rng, 4, 5)
    return _wsum(rng, lambda: bilinear_fuse_columns(q, v, p)), [q, v, p.core.gamma_c, p.w_q, p.w_v, p.w_o]


def _case_l1(rng):
    p = _tba_setup(rng)
    return (lambda: l1_core_penalty(p)), [p.core.gamma_c]


def _case_gate(rng):
    f = _p(rng, 3, 4, 4)
    return _wsum(rng, lambda: self_attention_gate(f)), [f]


def _case_tba_forward(plain_sum: bool):
    def make(rng):
        p = _tba_setup(rng)
        p2, p3 = _p(rng, 4, 4, 4), _p(rng, 4, 2, 2)
        fn = lambda: tba_forward(p2, p3, p)  # noqa: E731
        f = (lambda: ad.sum(fn())) if plain_sum else _wsum(rng, fn)
        return f, [p2, p3] + _tba_vars(p)

    return make


def _case_focal(rng):
    x = _p(rng, 3, 4, 4)
    t = (rng.uniform(size=(3, 4, 4)) < 0.3).astype(float)
    return (lambda: L.sigmoid_focal_loss(x, t)), [x]


def _case_smooth_l1(rng):
    x = _p(rng, 4, 3, 3)
    target = rng.normal(size=(4, 3, 3))
    mask = rng.uniform(size=(3, 3)) < 0.6
    return (lambda: L.smooth_l1_loss(x, target, mask, beta=0.5)), [x]


def _case_backbone(rng):
    image = _p(rng, 1, 32, 32)
    stem = nn.init_conv(rng, 1, 2, 3)
    chans = (2, 2, 4, 8, 16)
    convs = [nn.init_conv(rng, chans[i], chans[i + 1], 3) for i in range(4)]
    params = [image] + _conv_params(stem) + [v for c in convs for v in _conv_params(c)]
    _jitter(rng, params[1:])

    def fn():
        feats = backbone_stub(image, stem, convs)
        return ad.add_n([ad.weighted_sum(feats[k], w) for k, w in weights.items()])

    weights = {f"C{i}": rng.normal(size=s) for i, s in zip((2, 3, 4, 5), [(2, 8, 8), (4, 4, 4), (8, 2, 2), (16, 1, 1)])}
    return fn, params


def _case_fpn(rng):
    chans = (2, 4, 6, 8)
    sizes = (8, 4, 2, 1)
    inputs = [_p(rng, c, s, s) for c, s in zip(chans, sizes)]
    lats = [nn.init_conv(rng, c, 3, 1) for c in chans]
    smooths = [nn.init_conv(rng, 3, 3, 3) for _ in chans]
    conv_vars = [v for c in lats + smooths for v in _conv_params(c)]
    _jitter(rng, conv_vars)
    weights = {f"P{i + 2}": rng.normal(size=(3, s, s)) for i, s in enumerate(sizes)}

    def fn():
        out = fpn_lite(inputs, lats, smooths)
        return ad.add_n([ad.weighted_sum(out[k], w) for k, w in weights.items()])

    return fn, inputs + conv_vars


@dataclass
class GradcheckCase:
    name: str
    make: Callable
    max_entries: int | None = None


CASES = [
    GradcheckCase("add", _binary(ad.add)),
    GradcheckCase("sub", _binary(ad.sub)),
    GradcheckCase("mul", _binary(ad.mul)),
    GradcheckCase("mul_channel_broadcast", _binary(ad.mul, (2,))),
    GradcheckCase("add_channel_broadcast", _binary(ad.add, (2,))),
    GradcheckCase("add_scalar", _unary(lambda a: ad.add_scalar(a, 0.7))),
    GradcheckCase("mul_scalar", _unary(lambda a: ad.mul_scalar(a, -1.3))),
    GradcheckCase("tanh", _unary(ad.tanh)),
    GradcheckCase("sigmoid", _unary(ad.sigmoid)),
    GradcheckCase("relu", _unary(ad.relu)),
    GradcheckCase("abs", _unary(ad.abs)),
    GradcheckCase("sum", _unary(ad.sum)),
    GradcheckCase("weighted_sum", _case_weighted_sum),
    GradcheckCase("add_n", _case_add_n),
    GradcheckCase("reshape", _unary(lambda a: ad.reshape(a, (6, 4)))),
    GradcheckCase("transpose", _unary(ad.transpose, (3, 5))),
    GradcheckCase("global_max_pool", _unary(ad.global_max_pool, (3, 4, 4))),
    GradcheckCase("mode_n_product", _case_mode_product),
    GradcheckCase("einsum", _case_einsum),
    GradcheckCase("conv2d_1x1", _case_conv(1)),
    GradcheckCase("conv2d_3x3", _case_conv(3)),
    GradcheckCase("conv2d_3x3_stride2", _case_conv(3, stride=2)),
    GradcheckCase("upsample2x", _unary(nn.upsample2x, (2, 3, 3))),
    GradcheckCase("linear", _case_linear(False)),
    GradcheckCase("linear_columns", _case_linear(True)),
    GradcheckCase("ga_upsample_path", _case_ga_up),
    GradcheckCase("ga_guide", _case_ga_guide),
    GradcheckCase("ga_fuse", _case_ga_fuse),
    GradcheckCase("ga_forward", _case_ga_forward(False)),
    GradcheckCase("ga_forward_sum", _case_ga_forward(True)),
    GradcheckCase("bilinear_full", _case_bilinear_full),
    GradcheckCase("tucker_reconstruct", _case_reconstruct),
    GradcheckCase("bilinear_fuse", _case_fuse),
    GradcheckCase("bilinear_fuse_columns", _case_fuse_columns),
    GradcheckCase("l1_core_penalty", _case_l1),
    GradcheckCase("self_attention_gate", _case_gate),
    GradcheckCase("tba_forward", _case_tba_forward(False)),
    GradcheckCase("tba_forward_sum", _case_tba_forward(True)),
    GradcheckCase("focal_loss", _case_focal),
    GradcheckCase("smooth_l1_loss", _case_smooth_l1),
    GradcheckCase("backbone_stub", _case_backbone, max_entries=200),
    GradcheckCase("fpn_lite", _case_fpn),
]


def run_case(case: GradcheckCase, points: int = 3, seed: int = 0) -> float:
    """Worst relative error of ``case`` over ``points`` random draws."""
    worst = 0.0
    for k in range(points):
        rng = np.random.default_rng([seed, k, sum(map(ord, case.name))])
        f, params = case.make(rng)
        worst = max(worst, ad.grad_check(f, params, eps=EPS, max_entries=case.max_entries, rng=rng))
    return worst


def run_all(points: int = 3, seed: int = 0, names=None) -> list[tuple[str, float, float]]:
    """(name, max relative error, seconds) per case."""
    rows = []
    for case in CASES:
        if names and case.name not in names:
            continue
        t0 = time.perf_counter()
        err = run_case(case, points, seed)
        rows.append((case.name, err, time.perf_counter() - t0))
    return rows


def tiny_model_check(seed: int = 0, max_entries: int = 6) -> float:
    """End-to-end check of the full detector loss on a tiny model (S=32)."""
    from .pipeline.config import TrainConfig
    from .pipeline.synth import SceneSpec, generate_scene
    from .pipeline.train import total_loss

    # a high class prior keeps background gradients on the coarse (object-free)
    # levels well above central-difference roundoff
    cfg = ModelConfig(
        c_fpn=8, k_cat=3, ranks=(3, 3, 3), stem_width=4, widths=(4, 8, 16, 32), l1_weight=1e-2, prior_prob=0.3
    )
    model = Detector(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    params = list(model.parameters().values())
    _jitter(rng, [p for p in params if p.name and p.name.endswith("bias")])
    scene = generate_scene([seed, 99], SceneSpec(image_size=32, k_cat=3, tiers=("small", "small")))
    targets = L.build_targets(scene.boxes, scene.labels, 32, cfg.k_cat)
    f = lambda: total_loss(model, [(scene, targets)], TrainConfig(box_beta=0.5))  # noqa: E731
    return ad.grad_check(f, params, eps=EPS, max_entries=max_entries, rng=rng, kink_aware=True)
