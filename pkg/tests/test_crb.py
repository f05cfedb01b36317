import numpy as np
import pytest

from drfpn import autograd as ag
from drfpn import crb
from drfpn.autograd import Tensor
from drfpn.errors import ShapeError
from drfpn.gradcheck import gradcheck
from drfpn.params import ModelParams
from drfpn.reference import crb_fuse_reference

from conftest import randomize_zero_params, weighted_sum_loss

C = 8


def make_params(cfg=crb.CrbConfig(), direction="down", seed=0):
    p = ModelParams(seed)
    crb.declare(p, "blk", C, cfg, direction)
    return p


def test_gate_identity_conv_on_constant():
    p = make_params()
    p["blk.conv_gate.weight"].data = np.eye(C).reshape(C, C, 1, 1)
    x = np.broadcast_to(np.linspace(-2, 2, C).reshape(1, C, 1, 1), (1, C, 6, 6)).copy()
    alpha = crb.gate(Tensor(x), p, "blk").data.ravel()
    np.testing.assert_allclose(alpha, 1 / (1 + np.exp(-np.linspace(-2, 2, C))), rtol=1e-15)


def test_gate_shape_and_zero_init():
    p = ModelParams()
    crb.declare(p, "blk", 16, crb.CrbConfig())
    alpha = crb.gate(ag.randn((2, 16, 32, 32), seed=0), p, "blk")
    assert alpha.shape == (2, 16, 1, 1)
    assert np.all(alpha.data == 0.5)


def test_gate_gradients():
    p = randomize_zero_params(make_params(), 1)
    loss = weighted_sum_loss((1, C, 1, 1), 2)
    assert gradcheck(lambda t: loss(crb.gate(t, p, "blk")), ag.randn((1, C, 6, 6), seed=3)) < 1e-6


def _fuse_parts(p):
    return {k: p[f"blk.{k}"].data for k in (
        "conv_refine.weight", "conv_refine.bias", "conv_down.weight", "conv_down.bias",
        "conv_out.weight", "conv_out.bias")}


def test_fuse_unit_gate():
    p = make_params()
    lo, hi = ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 4, 4), seed=2)
    out = crb.fuse(lo, hi, ag.full((1, C, 1, 1), 1.0), p, "blk")
    expected = p.conv("blk.conv_out", ag.add(p.conv("blk.conv_refine", hi), p.conv("blk.conv_down", lo, 2)))
    assert np.array_equal(out.data, expected.data)


def test_fuse_zero_gate():
    p = make_params()
    lo, hi = ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 4, 4), seed=2)
    out = crb.fuse(lo, hi, ag.zeros((1, C, 1, 1)), p, "blk")
    expected = p.conv("blk.conv_out", p.conv("blk.conv_down", lo, 2))
    np.testing.assert_allclose(out.data, expected.data, atol=1e-14)


def test_fuse_matches_reference(rng):
    p = make_params()
    w = _fuse_parts(p)
    for _ in range(5):
        lo, hi = rng.standard_normal((2, C, 8, 6)), rng.standard_normal((2, C, 4, 3))
        alpha = rng.uniform(0, 1, (2, C, 1, 1))
        out = crb.fuse(Tensor(lo), Tensor(hi), Tensor(alpha), p, "blk").data
        ref = crb_fuse_reference(lo, hi, alpha, w["conv_refine.weight"], w["conv_refine.bias"],
                                 w["conv_down.weight"], w["conv_down.bias"], w["conv_out.weight"], w["conv_out.bias"])
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_fuse_rejects_bad_ratio():
    p = make_params()
    with pytest.raises(ShapeError):
        crb.fuse(ag.zeros((1, C, 8, 8)), ag.zeros((1, C, 3, 3)), ag.zeros((1, C, 1, 1)), p, "blk")


def test_forward_shape():
    p = make_params()
    assert crb.forward(ag.randn((1, C, 32, 32), seed=0), ag.randn((1, C, 16, 16), seed=1), p, "blk").shape == (1, C, 16, 16)


def test_gate_reads_low_level_only():
    p = randomize_zero_params(make_params(), 4)
    lo = ag.randn((1, C, 8, 8), seed=1)
    a1 = crb.gate(lo, p, "blk", p_dst=ag.randn((1, C, 4, 4), seed=2)).data
    a2 = crb.gate(lo, p, "blk", p_dst=ag.randn((1, C, 4, 4), seed=3)).data
    assert np.array_equal(a1, a2)
    lo = ag.randn((1, C, 8, 8), seed=1, requires_grad=True)
    hi = ag.randn((1, C, 4, 4), seed=2, requires_grad=True)
    grads = ag.backward(ag.sum(crb.gate(lo, p, "blk", p_dst=hi)))
    assert hi not in grads and np.any(grads[lo] != 0)


def test_forward_gradients():
    p = randomize_zero_params(make_params(), 5, scale=0.2)
    lo, hi = ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 4, 4), seed=2)
    loss = weighted_sum_loss((1, C, 4, 4), 6)
    assert gradcheck(lambda t: loss(crb.forward(t, hi, p, "blk")), lo) < 1e-5
    assert gradcheck(lambda t: loss(crb.forward(lo, t, p, "blk")), hi) < 1e-5


@pytest.mark.parametrize("source", ["high", "add", "cat"])
def test_gate_source_variants(source):
    cfg = crb.CrbConfig(gate_source=source)
    p = make_params(cfg)
    assert p.count() == crb.num_params(C, cfg)
    out = crb.forward(ag.randn((1, C, 8, 8), seed=0), ag.randn((1, C, 4, 4), seed=1), p, "blk", cfg)
    assert out.shape == (1, C, 4, 4)


def test_kernel_flags():
    cfg = crb.CrbConfig(refine_kernel=1, out_kernel=1)
    p = make_params(cfg)
    assert p["blk.conv_refine.weight"].shape == (C, C, 1, 1)
    assert p["blk.conv_out.weight"].shape == (C, C, 1, 1)
    assert p.count() == crb.num_params(C, cfg)


def test_upward_direction():
    p = randomize_zero_params(make_params(direction="up"), 1, scale=0.2)
    assert "blk.conv_down.weight" not in p
    coarse, fine = ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2)
    assert crb.forward(coarse, fine, p, "blk").shape == (1, C, 8, 8)
    assert p.count() == crb.num_params(C, crb.CrbConfig(), "up")
