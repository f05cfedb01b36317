"""Acceptance checks, one function per criterion, chained by the ``verify`` subcommand."""
from __future__ import annotations

import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autograd as ag
from .. import crb, ops, pyramid as pm, srb
from ..autograd import Tensor
from ..errors import FormatError
from ..ops import ConvSpec
from ..params import ModelParams
from ..reference import (conv2d_naive, conv_transpose_naive, crb_fuse_reference, nearest_up,
                         srb_fuse_reference, upsample_bilinear_naive)
from .config import RunConfig
from .suite import format_table, run_suite
from .train import train
from .weights import decode, encode, load_weights, save_weights

CONV_SPECS = (
    ConvSpec(3, 4, kernel=3, stride=1),
    ConvSpec(3, 4, kernel=1, stride=1),
    ConvSpec(3, 4, kernel=3, stride=2),
    ConvSpec(2, 3, kernel=3, stride=2, has_bias=False),
)
INSTANCES = 100


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def gradient_suite(seed: int = 0, limit_s: float = 600.0) -> CheckResult:
    t0 = time.perf_counter()
    results = run_suite("full", seed)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < limit_s
    detail = f"{len(results) - len(failed)}/{len(results)} cases within threshold in {elapsed:.1f}s (limit {limit_s:.0f}s)"
    if failed:
        detail += "; failing: " + ", ".join(failed)
    return CheckResult("gradient suite", ok, detail + "\n" + format_table(results))


def oracle_equivalence(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    conv_err = convt_err = adj_err = 0.0
    for spec in CONV_SPECS:
        for _ in range(INSTANCES):
            n, h, w = int(rng.integers(1, 3)), int(rng.integers(3, 8)), int(rng.integers(3, 8))
            x = rng.standard_normal((n, spec.in_channels, h, w))
            wt = rng.standard_normal(spec.weight_shape)
            b = rng.standard_normal((1, spec.out_channels, 1, 1)) if spec.has_bias else None
            got = ops.conv2d(Tensor(x), spec, Tensor(wt), None if b is None else Tensor(b)).data
            conv_err = max(conv_err, float(np.max(np.abs(got - conv2d_naive(x, wt, b, spec.stride, spec.padding)))))
    for _ in range(INSTANCES):
        n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x, wt, b = rng.standard_normal((n, ci, h, w)), rng.standard_normal((ci, co, 3, 3)), rng.standard_normal((1, co, 1, 1))
        got = ops.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b)).data
        convt_err = max(convt_err, float(np.max(np.abs(got - conv_transpose_naive(x, wt, b)))))
        # <conv(y), x> == <y, conv_transpose(x)> for the stride-2 conv with the same kernel
        spec = ConvSpec(co, ci, kernel=3, stride=2, has_bias=False)
        y = rng.standard_normal((n, co, 2 * h, 2 * w))
        lhs = float(np.vdot(ops.conv2d(Tensor(y), spec, Tensor(wt)).data, x))
        rhs = float(np.vdot(y, ops.conv_transpose2d(Tensor(x), Tensor(wt)).data))
        adj_err = max(adj_err, abs(lhs - rhs))
    ok = conv_err <= 1e-12 and convt_err <= 1e-12 and adj_err <= 1e-10
    return CheckResult("oracle equivalence", ok,
                       f"conv2d max |diff| {conv_err:.2e}, conv_transpose2d {convt_err:.2e} (tol 1e-12); "
                       f"adjoint {adj_err:.2e} (tol 1e-10); {INSTANCES} instances per configuration")


def fuse_exactness(seed: int = 0, channels: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    srb_err = crb_err = 0.0
    for i in range(INSTANCES):
        p = ModelParams(seed + i)
        srb.declare(p, "s", channels, srb.SrbConfig())
        crb.declare(p, "c", channels, crb.CrbConfig())
        n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        hi, lo = rng.standard_normal((n, channels, h, w)), rng.standard_normal((n, channels, 2 * h, 2 * w))
        ft, om = rng.standard_normal(lo.shape), rng.uniform(0, 1, (n, 1, 2 * h, 2 * w))
        got = srb.fuse(Tensor(ft), Tensor(om), Tensor(hi), Tensor(lo), p, "s").data
        ref = srb_fuse_reference(ft, om, hi, lo, p["s.conv_out.weight"].data, p["s.conv_out.bias"].data)
        srb_err = max(srb_err, float(np.max(np.abs(got - ref))))
        alpha = rng.uniform(0, 1, (n, channels, 1, 1))
        got = crb.fuse(Tensor(lo), Tensor(hi), Tensor(alpha), p, "c").data
        w_ = {k: p[f"c.{k}"].data for k in ("conv_refine.weight", "conv_refine.bias", "conv_down.weight",
                                             "conv_down.bias", "conv_out.weight", "conv_out.bias")}
        ref = crb_fuse_reference(lo, hi, alpha, w_["conv_refine.weight"], w_["conv_refine.bias"],
                                 w_["conv_down.weight"], w_["conv_down.bias"], w_["conv_out.weight"], w_["conv_out.bias"])
        crb_err = max(crb_err, float(np.max(np.abs(got - ref))))
    ok = srb_err <= 1e-12 and crb_err <= 1e-12
    return CheckResult("fuse exactness", ok,
                       f"srb_fuse max |diff| {srb_err:.2e}, crb_fuse {crb_err:.2e} over {INSTANCES} instances (tol 1e-12)")


def degeneracy_chain(seed: int = 0, channels: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    notes = []
    # (a) zero offsets reproduce bilinear upsampling bit for bit
    hi = Tensor(rng.standard_normal((2, channels, 5, 6)))
    warped = srb.warp(hi, ag.zeros((2, 2, 10, 12))).data
    a = np.array_equal(warped, ops.upsample2x("bilinear", hi).data) and \
        float(np.max(np.abs(warped - upsample_bilinear_naive(hi.data)))) <= 1e-14
    notes.append(f"(a) zero-offset warp {'==' if a else '!='} bilinear upsample")

    # (b) zero-initialized heads: delta = 0, omega = 1/2, alpha = 1/2
    p = ModelParams(seed)
    srb.declare(p, "s", channels, srb.SrbConfig())
    crb.declare(p, "c", channels, crb.CrbConfig())
    hi = Tensor(rng.standard_normal((1, channels, 4, 4)))
    lo = Tensor(rng.standard_normal((1, channels, 8, 8)))
    srb_out = srb.forward(hi, lo, p, "s").data
    inner = 0.5 * upsample_bilinear_naive(hi.data) + nearest_up(hi.data) + lo.data
    srb_ref = p.conv("s.conv_out", Tensor(inner)).data
    alpha = crb.gate(lo, p, "c").data
    crb_out = crb.forward(lo, hi, p, "c").data
    crb_ref = p.conv("c.conv_out", ag.add(ag.scale(p.conv("c.conv_refine", hi), 0.5), p.conv("c.conv_down", lo, 2))).data
    b_err = max(float(np.max(np.abs(srb_out - srb_ref))), float(np.max(np.abs(crb_out - crb_ref))))
    b = bool(np.all(alpha == 0.5)) and b_err <= 1e-12
    notes.append(f"(b) zero-init closed forms max |diff| {b_err:.1e}, alpha == 1/2: {bool(np.all(alpha == 0.5))}")

    # (c) every refinement toggle off is plain FPN, bit for bit
    cfg = pm.PyramidConfig(channels=channels, srb_enabled=False, crb_enabled=False, ppm_enabled=False)
    params = pm.build_params(cfg, seed)
    levels = pm.toy_backbone(Tensor(rng.standard_normal((1, 3, 64, 64))), params)
    c = all(x.data.tobytes() == y.data.tobytes()
            for x, y in zip(pm.drfpn_forward(levels, cfg, params), pm.fpn_forward(levels, params)))
    notes.append(f"(c) all-off drfpn_forward {'==' if c else '!='} fpn_forward bitwise")
    return CheckResult("degeneracy chain", a and b and c, "; ".join(notes))


def offset_shift(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for h, w in ((12, 12), (8, 12), (16, 10)):
        hi = Tensor(rng.standard_normal((1, 3, h // 2, w // 2)))
        base = srb.warp(hi, ag.zeros((1, 2, h, w))).data
        for axis in (0, 1):
            d = np.zeros((1, 2, h, w))
            d[:, axis] = (h + w) / 2.0
            shifted = srb.warp(hi, Tensor(d)).data
            # one coarse pixel is two fine pixels; skip the border columns/rows touched by clamping
            if axis == 0:
                ok &= np.array_equal(shifted[..., 1:w - 3], base[..., 3:w - 1])
            else:
                ok &= np.array_equal(shifted[:, :, 1:h - 3], base[:, :, 3:h - 1])
    return CheckResult("offset normalization", bool(ok),
                       "raw offset (H+W)/2 moves interior content by exactly one coarse pixel in x and y")


def ablation_parity(channels: int = 32) -> CheckResult:
    base = dict(channels=channels, ppm_bins=(1, 2))
    c = channels
    ref = pm.PyramidConfig(srb_enabled=False, crb_enabled=False, ppm_enabled=False, **base)
    fpn_total = pm.param_count(ref)["total"]
    srb_size = 3 * srb.num_params(c, ref.srb)
    crb_size = 3 * crb.num_params(c, ref.crb, "down")
    c5, nb = ref.in_channels[3], 2
    ppm_size = (nb * ((c5 // nb) * c5 + c5 // nb) + (c * (c5 + c5) + c) + (c * (c + c5) + c)
                - (c * c5 + c))  # the pooled seed replaces the top lateral
    bad = []
    for srb_on, crb_on, ppm_on in itertools.product([False, True], repeat=3):
        cfg = pm.PyramidConfig(srb_enabled=srb_on, crb_enabled=crb_on, ppm_enabled=ppm_on, **base)
        want = fpn_total + srb_on * srb_size + crb_on * crb_size + ppm_on * ppm_size
        got = pm.build_params(cfg, 0, backbone=False).count()
        if got != want or pm.param_count(cfg)["total"] != want:
            bad.append(f"srb={srb_on} crb={crb_on} ppm={ppm_on}: registry {got}, expected {want}")
    shapes_ok = True
    for placement in pm.PLACEMENTS:
        cfg = pm.PyramidConfig(placement=placement, **base)
        params = pm.build_params(cfg, 0)
        out = pm.Model(cfg, params)(Tensor(np.zeros((1, 3, 64, 64))))
        shapes_ok &= out.shapes() == [(1, c, 64 // s, 64 // s) for s in pm.STRIDES]
        shapes_ok &= params.count() - params.count("backbone.") == pm.param_count(cfg)["total"]
    detail = (f"8 toggle combinations match closed-form deltas (SRB {srb_size}, CRB {crb_size}, PPM {ppm_size:+d} "
              f"over FPN {fpn_total})" if not bad else "; ".join(bad))
    detail += f"; {len(pm.PLACEMENTS)} placements {'build with correct shapes' if shapes_ok else 'FAILED'}"
    return CheckResult("structural ablation parity", not bad and bool(shapes_ok), detail)


def training_smoke(cfg: RunConfig | None = None, limit_s: float = 1800.0) -> CheckResult:
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    notes, ok = [], True
    fpn_cfg = cfg.replace(srb_enabled=False, crb_enabled=False, ppm_enabled=False)
    weights = []
    for label, run_cfg in (("fpn", fpn_cfg), ("drfpn", cfg), ("drfpn-repeat", cfg)):
        report = train(run_cfg)
        if label != "drfpn-repeat":
            ratio = report.final_loss / report.initial_loss
            ok &= ratio <= 0.5
            notes.append(f"{label} loss {report.initial_loss:.4g} -> {report.final_loss:.4g} (x{ratio:.3f})")
        if label.startswith("drfpn"):
            weights.append(encode(report.params))
    same = weights[0] == weights[1]
    elapsed = time.perf_counter() - t0
    ok &= same and elapsed < limit_s
    notes.append(f"repeat run weight files {'identical' if same else 'DIFFER'}")
    notes.append(f"{cfg.steps} steps each, {elapsed:.1f}s total")
    return CheckResult("training smoke", bool(ok), "; ".join(notes))


def persistence(seed: int = 0) -> CheckResult:
    cfg = pm.PyramidConfig(channels=8, ppm_bins=(1, 2))
    params = pm.build_params(cfg, seed)
    params["backbone.stem.weight"].data = params["backbone.stem.weight"].data.astype(np.float32)
    notes, ok = [], True
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.drfw"
        save_weights(params, path)
        first = path.read_bytes()
        loaded = load_weights(path, params.shapes())
        lossless = list(loaded) == list(params) and all(
            loaded[n].data.dtype == params[n].data.dtype and loaded[n].data.tobytes() == params[n].data.tobytes()
            for n in params)
        save_weights(loaded, path)
        ok &= lossless and path.read_bytes() == first
        notes.append(f"round trip {'bitwise lossless' if lossless else 'LOSSY'}")

        def rejected(buf, expected, needle):
            try:
                decode(buf, expected)
            except FormatError as exc:
                return needle in str(exc)
            return False

        truncated = rejected(first[:len(first) - 7], None, "truncated")
        bad_magic = rejected(b"XXXX" + first[4:], None, "magic")
        wrong = params.shapes()
        wrong["ppm.reduce.weight"] = (8, 1, 1, 1)
        named = rejected(first, wrong, "ppm.reduce.weight")
        ok &= truncated and bad_magic and named
        notes.append(f"truncated rejected: {truncated}, bad magic rejected: {bad_magic}, "
                     f"shape mismatch names the tensor: {named}")
    return CheckResult("persistence", bool(ok), "; ".join(notes))


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": gradient_suite,
    "oracle": oracle_equivalence,
    "fuse": fuse_exactness,
    "degeneracy": degeneracy_chain,
    "offset": offset_shift,
    "ablation": ablation_parity,
    "training": training_smoke,
    "persistence": persistence,
}
