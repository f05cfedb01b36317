"""Registered finite-difference gradient checks, grouped by scope.

``op`` covers every autodiff primitive and layer kernel, ``module`` the refinement
blocks and pyramid pooling, ``full`` the whole backbone-to-loss graph on a 64x64 image.
Linear maps are checked with a large step (central differences are exact for them),
everything else with a small one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .. import autograd as ag
from .. import crb, ops, pyramid as pm, srb
from ..autograd import Tensor
from ..gradcheck import gradcheck
from ..ops import ConvSpec
from ..params import ModelParams

SCOPES = ("op", "module", "full")
LINEAR_EPS, LINEAR_TOL = 0.5, 1e-10
SMOOTH_EPS, SMOOTH_TOL = 1e-6, 1e-6
COMPOSITE_TOL = 1e-4

Check = tuple[Callable[[Tensor], Tensor], np.ndarray, float, int | None, bool]  # f, x, eps, max_coords, norm


@dataclass(frozen=True)
class GradCase:
    name: str
    scope: str
    threshold: float
    build: Callable[[np.random.Generator], list[Check]]


@dataclass
class CaseResult:
    name: str
    scope: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.threshold)


REGISTRY: list[GradCase] = []


def register(name: str, scope: str, threshold: float):
    def deco(build):
        REGISTRY.append(GradCase(name, scope, threshold, build))
        return build
    return deco


def linear_loss(shape, rng):
    """``sum(w * y)`` with |w| in [0.5, 1.5] and random signs."""
    w = Tensor(rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape))
    return lambda y: ag.sum(ag.mul(y, w))


def _randomize_zeros(params: ModelParams, rng, scale):
    # zero-initialized heads would hide whole branches from the check
    for t in params.values():
        if not np.any(t.data):
            t.data = scale * rng.standard_normal(t.shape)
    return params


def _lin(f, x):
    return (f, x, LINEAR_EPS, None, False)


def _smooth(f, x, max_coords=None, norm=False):
    return (f, x, SMOOTH_EPS, max_coords, norm)


# ---------------------------------------------------------------- autodiff core

@register("add", "op", LINEAR_TOL)
def _(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    loss = linear_loss((2, 3, 4, 4), rng)
    return [_lin(lambda t: loss(ag.add(t, Tensor(b))), a), _lin(lambda t: loss(ag.add(Tensor(a), t)), b)]


@register("sub", "op", LINEAR_TOL)
def _(rng):
    a, b = rng.standard_normal((1, 2, 3, 5)), rng.standard_normal((1, 2, 3, 5))
    loss = linear_loss((1, 2, 3, 5), rng)
    return [_lin(lambda t: loss(ag.sub(t, Tensor(b))), a), _lin(lambda t: loss(ag.sub(Tensor(a), t)), b)]


@register("mul", "op", LINEAR_TOL)
def _(rng):
    # bilinear: linear in each argument with the other held fixed
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))
    loss = linear_loss((1, 2, 3, 3), rng)
    return [_lin(lambda t: loss(ag.mul(t, Tensor(b))), a), _lin(lambda t: loss(ag.mul(Tensor(a), t)), b)]


@register("mul_broadcast", "op", LINEAR_TOL)
def _(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1))
    c = rng.standard_normal((2, 1, 4, 4))
    loss = linear_loss((2, 3, 4, 4), rng)
    return [_lin(lambda t: loss(ag.mul(Tensor(a), t)), b), _lin(lambda t: loss(ag.mul(Tensor(a), t)), c)]


@register("scale", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((1, 2, 3, 3), rng)
    return [_lin(lambda t: loss(ag.scale(t, -1.75)), rng.standard_normal((1, 2, 3, 3)))]


@register("concat", "op", LINEAR_TOL)
def _(rng):
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    loss = linear_loss((1, 5, 3, 3), rng)
    return [_lin(lambda t: loss(ag.concat_channels(t, Tensor(b))), a),
            _lin(lambda t: loss(ag.concat_channels(Tensor(a), t)), b)]


@register("slice_channels", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((1, 2, 3, 3), rng)
    return [_lin(lambda t: loss(ag.slice_channels(t, 1, 3)), rng.standard_normal((1, 4, 3, 3)))]


@register("relu", "op", SMOOTH_TOL)
def _(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    loss = linear_loss((1, 2, 4, 4), rng)
    return [_smooth(lambda t: loss(ag.relu(t)), x)]


@register("sigmoid", "op", SMOOTH_TOL)
def _(rng):
    loss = linear_loss((1, 2, 4, 4), rng)
    return [_smooth(lambda t: loss(ag.sigmoid(t)), 3 * rng.standard_normal((1, 2, 4, 4)))]


@register("sum", "op", LINEAR_TOL)
def _(rng):
    return [_lin(ag.sum, rng.standard_normal((2, 3, 2, 2)))]


@register("mean", "op", LINEAR_TOL)
def _(rng):
    return [_lin(ag.mean, rng.standard_normal((2, 3, 2, 2)))]


@register("mse", "op", LINEAR_TOL)
def _(rng):
    # quadratic: central differences are exact up to rounding
    p, y = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))
    return [_lin(lambda t: ag.mse(t, Tensor(y)), p), _lin(lambda t: ag.mse(Tensor(p), t), y)]


# ------------------------------------------------------------------ layer ops

def _conv_case(spec: ConvSpec):
    def build(rng):
        x = rng.standard_normal((2, spec.in_channels, 6, 6))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal((1, spec.out_channels, 1, 1))
        loss = linear_loss((2, spec.out_channels, *spec.output_size(6, 6)), rng)
        X, W, B = Tensor(x), Tensor(w), Tensor(b)
        return [_lin(lambda t: loss(ops.conv2d(t, spec, W, B)), x),
                _lin(lambda t: loss(ops.conv2d(X, spec, t, B)), w),
                _lin(lambda t: loss(ops.conv2d(X, spec, W, t)), b)]
    return build


for _spec, _tag in ((ConvSpec(3, 4, 3, 1), "k3s1"), (ConvSpec(3, 4, 1, 1), "k1s1"), (ConvSpec(3, 4, 3, 2), "k3s2")):
    register(f"conv2d_{_tag}", "op", LINEAR_TOL)(_conv_case(_spec))


@register("conv_transpose2d", "op", LINEAR_TOL)
def _(rng):
    x, w, b = rng.standard_normal((1, 3, 3, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((1, 2, 1, 1))
    loss = linear_loss((1, 2, 6, 8), rng)
    X, W, B = Tensor(x), Tensor(w), Tensor(b)
    return [_lin(lambda t: loss(ops.conv_transpose2d(t, W, B)), x),
            _lin(lambda t: loss(ops.conv_transpose2d(X, t, B)), w),
            _lin(lambda t: loss(ops.conv_transpose2d(X, W, t)), b)]


@register("grid_sample_source", "op", LINEAR_TOL)
def _(rng):
    grid = Tensor(rng.uniform(-1.0, 5.0, (2, 2, 3, 3)))
    loss = linear_loss((2, 2, 3, 3), rng)
    return [_lin(lambda t: loss(ops.grid_sample_bilinear(t, grid)), rng.standard_normal((2, 2, 4, 5)))]


@register("grid_sample_grid", "op", SMOOTH_TOL)
def _(rng):
    src = Tensor(rng.standard_normal((2, 2, 4, 5)))
    # interior, non-integer coordinates: the sampler is piecewise bilinear in them
    grid = rng.integers(0, 3, (2, 2, 3, 3)) + rng.uniform(0.2, 0.8, (2, 2, 3, 3))
    loss = linear_loss((2, 2, 3, 3), rng)
    return [_smooth(lambda t: loss(ops.grid_sample_bilinear(src, t)), grid)]


@register("resize_bilinear", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((1, 2, 5, 7), rng)
    return [_lin(lambda t: loss(ops.resize_bilinear(t, 5, 7)), rng.standard_normal((1, 2, 2, 3)))]


@register("upsample_nearest", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((1, 2, 6, 8), rng)
    return [_lin(lambda t: loss(ops.upsample2x("nearest", t)), rng.standard_normal((1, 2, 3, 4)))]


@register("upsample_bilinear", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((1, 2, 6, 8), rng)
    return [_lin(lambda t: loss(ops.upsample2x("bilinear", t)), rng.standard_normal((1, 2, 3, 4)))]


@register("global_avg_pool", "op", LINEAR_TOL)
def _(rng):
    loss = linear_loss((2, 3, 1, 1), rng)
    return [_lin(lambda t: loss(ops.global_avg_pool(t)), rng.standard_normal((2, 3, 5, 4)))]


@register("adaptive_avg_pool", "op", LINEAR_TOL)
def _(rng):
    checks = []
    for bins in (1, 2, 3):
        loss = linear_loss((1, 2, bins, bins), rng)
        checks.append(_lin(lambda t, b=bins, l=loss: l(ops.adaptive_avg_pool(t, b)), rng.standard_normal((1, 2, 5, 6))))
    return checks


# ------------------------------------------------------------------- modules

C = 8


def _srb_params(rng, direction="up"):
    p = ModelParams(int(rng.integers(2 ** 31)))
    srb.declare(p, "blk", C, srb.SrbConfig(), direction)
    return _randomize_zeros(p, rng, 0.2)


def _crb_params(rng, direction="down"):
    p = ModelParams(int(rng.integers(2 ** 31)))
    crb.declare(p, "blk", C, crb.CrbConfig(), direction)
    return _randomize_zeros(p, rng, 0.2)


@register("srb_subnet", "module", COMPOSITE_TOL)
def _(rng):
    p = _srb_params(rng)
    hi, lo = rng.standard_normal((1, C, 4, 4)), rng.standard_normal((1, C, 8, 8))
    ld, lw = linear_loss((1, 2, 8, 8), rng), linear_loss((1, 1, 8, 8), rng)

    def run(s, d):
        delta, omega = srb.subnet(s, d, p, "blk")
        return ag.add(ld(delta), lw(omega))
    return [_smooth(lambda t: run(t, Tensor(lo)), hi), _smooth(lambda t: run(Tensor(hi), t), lo)]


@register("srb_warp", "module", COMPOSITE_TOL)
def _(rng):
    hi = rng.standard_normal((1, 3, 4, 4))
    delta = rng.uniform(-2.0, 2.0, (1, 2, 8, 8))
    loss = linear_loss((1, 3, 8, 8), rng)
    return [_smooth(lambda t: loss(srb.warp(t, Tensor(delta))), hi),
            _smooth(lambda t: loss(srb.warp(Tensor(hi), t)), delta)]


@register("srb_fuse", "module", COMPOSITE_TOL)
def _(rng):
    p = _srb_params(rng)
    ft, om = rng.standard_normal((1, C, 8, 8)), rng.uniform(0, 1, (1, 1, 8, 8))
    hi, lo = Tensor(rng.standard_normal((1, C, 4, 4))), Tensor(rng.standard_normal((1, C, 8, 8)))
    loss = linear_loss((1, C, 8, 8), rng)
    return [_smooth(lambda t: loss(srb.fuse(t, Tensor(om), hi, lo, p, "blk")), ft),
            _smooth(lambda t: loss(srb.fuse(Tensor(ft), t, hi, lo, p, "blk")), om)]


@register("srb_forward", "module", COMPOSITE_TOL)
def _(rng):
    p = _srb_params(rng)
    hi, lo = rng.standard_normal((1, C, 4, 4)), rng.standard_normal((1, C, 8, 8))
    loss = linear_loss((1, C, 8, 8), rng)
    return [_smooth(lambda t: loss(srb.forward(t, Tensor(lo), p, "blk")), hi),
            _smooth(lambda t: loss(srb.forward(Tensor(hi), t, p, "blk")), lo)]


@register("srb_forward_down", "module", COMPOSITE_TOL)
def _(rng):
    p = _srb_params(rng, "down")
    fine, coarse = rng.standard_normal((1, C, 8, 8)), rng.standard_normal((1, C, 4, 4))
    loss = linear_loss((1, C, 4, 4), rng)
    return [_smooth(lambda t: loss(srb.forward(t, Tensor(coarse), p, "blk")), fine),
            _smooth(lambda t: loss(srb.forward(Tensor(fine), t, p, "blk")), coarse)]


@register("crb_gate", "module", COMPOSITE_TOL)
def _(rng):
    p = _crb_params(rng)
    loss = linear_loss((1, C, 1, 1), rng)
    return [_smooth(lambda t: loss(crb.gate(t, p, "blk")), rng.standard_normal((1, C, 6, 6)))]


@register("crb_fuse", "module", COMPOSITE_TOL)
def _(rng):
    p = _crb_params(rng)
    lo, hi = rng.standard_normal((1, C, 8, 8)), rng.standard_normal((1, C, 4, 4))
    alpha = rng.uniform(0, 1, (1, C, 1, 1))
    loss = linear_loss((1, C, 4, 4), rng)
    return [_smooth(lambda t: loss(crb.fuse(t, Tensor(hi), Tensor(alpha), p, "blk")), lo),
            _smooth(lambda t: loss(crb.fuse(Tensor(lo), t, Tensor(alpha), p, "blk")), hi),
            _smooth(lambda t: loss(crb.fuse(Tensor(lo), Tensor(hi), t, p, "blk")), alpha)]


@register("crb_forward", "module", COMPOSITE_TOL)
def _(rng):
    p = _crb_params(rng)
    lo, hi = rng.standard_normal((1, C, 8, 8)), rng.standard_normal((1, C, 4, 4))
    loss = linear_loss((1, C, 4, 4), rng)
    return [_smooth(lambda t: loss(crb.forward(t, Tensor(hi), p, "blk")), lo),
            _smooth(lambda t: loss(crb.forward(Tensor(lo), t, p, "blk")), hi)]


@register("crb_forward_up", "module", COMPOSITE_TOL)
def _(rng):
    p = _crb_params(rng, "up")
    coarse, fine = rng.standard_normal((1, C, 4, 4)), rng.standard_normal((1, C, 8, 8))
    loss = linear_loss((1, C, 8, 8), rng)
    return [_smooth(lambda t: loss(crb.forward(t, Tensor(fine), p, "blk")), coarse),
            _smooth(lambda t: loss(crb.forward(Tensor(coarse), t, p, "blk")), fine)]


@register("ppm", "module", COMPOSITE_TOL)
def _(rng):
    cfg = pm.PyramidConfig(channels=C, in_channels=(4, 4, 4, 8), ppm_bins=(1, 2))
    p = _randomize_zeros(pm.build_params(cfg, int(rng.integers(2 ** 31)), backbone=False), rng, 0.2)
    loss = linear_loss((1, C, 4, 4), rng)
    return [_smooth(lambda t: loss(pm.ppm_forward(t, p, (1, 2))), rng.standard_normal((1, 8, 4, 4)))]


# ---------------------------------------------------------------------- full

def full_model(rng, image_size=64, channels=C):
    cfg = pm.PyramidConfig(channels=channels, ppm_bins=(1, 2))
    params = _randomize_zeros(pm.build_params(cfg, int(rng.integers(2 ** 31))), rng, 0.1)
    n = image_size // 4
    targets = [Tensor(rng.standard_normal((1, channels, n >> i, n >> i))) for i in range(4)]

    def loss(image: Tensor) -> Tensor:
        out = pm.Model(cfg, params)(image)
        total = None
        for o, y in zip(out, targets):
            term = ag.mse(o, y)
            total = term if total is None else ag.add(total, term)
        return total
    return cfg, params, loss


@register("drfpn_to_loss_image", "full", COMPOSITE_TOL)
def _(rng):
    _, _, loss = full_model(rng)
    # 12k input gradients: judged as one vector (see gradcheck's ``norm``)
    return [_smooth(loss, rng.standard_normal((1, 3, 64, 64)), norm=True)]


@register("drfpn_to_loss_params", "full", COMPOSITE_TOL)
def _(rng):
    _, params, loss = full_model(rng)
    image = Tensor(rng.standard_normal((1, 3, 64, 64)))
    checks = []
    for name, t in params.items():
        def f(w, name=name, t=t):
            saved = params[name]
            params[name] = w
            try:
                return loss(image)
            finally:
                params[name] = saved
        checks.append(_smooth(f, t.data.copy(), max_coords=8, norm=True))
    return checks


# ---------------------------------------------------------------------- driver

def cases(scope: str) -> list[GradCase]:
    """Cases for ``scope``; ``full`` also includes every smaller scope."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    wanted = SCOPES[:SCOPES.index(scope) + 1]
    return [c for c in REGISTRY if c.scope in wanted]


def run_case(case: GradCase, seed: int) -> CaseResult:
    rng = np.random.default_rng([seed, len(case.name), *case.name.encode()])
    t0 = time.perf_counter()
    err = 0.0
    for i, (f, x, eps, max_coords, norm) in enumerate(case.build(rng)):
        err = max(err, gradcheck(f, x, eps=eps, max_coords=max_coords, seed=seed + i, norm=norm))
    return CaseResult(case.name, case.scope, err, case.threshold, time.perf_counter() - t0)


def run_suite(scope: str, seed: int = 0, only: Iterable[str] | None = None) -> list[CaseResult]:
    keep = set(only) if only is not None else None
    return [run_case(c, seed) for c in cases(scope) if keep is None or c.name in keep]


def format_table(results: list[CaseResult]) -> str:
    width = max([len(r.name) for r in results] + [4])
    lines = [f"{'case':<{width}}  scope   max_rel_err  threshold  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.scope:<6}  {r.error:11.3e}  {r.threshold:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} cases passed")
    return "\n".join(lines)
