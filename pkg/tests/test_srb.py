import numpy as np
import pytest

from drfpn import autograd as ag
from drfpn import ops, srb
from drfpn.autograd import Tensor
from drfpn.errors import ShapeError
from drfpn.gradcheck import gradcheck
from drfpn.params import ModelParams
from drfpn.reference import srb_fuse_reference, upsample_bilinear_naive

from conftest import randomize_zero_params, weighted_sum_loss

C = 8


def make_params(cfg=srb.SrbConfig(), seed=0, direction="up"):
    p = ModelParams(seed)
    srb.declare(p, "blk", C, cfg, direction)
    return p


def identity_conv_out(params):
    w = np.zeros((C, C, 3, 3))
    w[np.arange(C), np.arange(C), 1, 1] = 1.0
    params["blk.conv_out.weight"].data = w
    params["blk.conv_out.bias"].data = np.zeros((1, C, 1, 1))


def test_zero_init_heads():
    p = make_params()
    delta, omega = srb.subnet(ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 16, 16), seed=2), p, "blk")
    assert delta.shape == (1, 2, 16, 16) and omega.shape == (1, 1, 16, 16)
    assert np.all(delta.data == 0.0) and np.all(omega.data == 0.5)


def test_subnet_rejects_non_2to1():
    p = make_params()
    with pytest.raises(ShapeError):
        srb.subnet(ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 12, 12), seed=2), p, "blk")


def test_ratio_must_divide():
    with pytest.raises(ShapeError):
        srb.declare(ModelParams(), "x", 6, srb.SrbConfig(ratio=4))


def test_subnet_gradients():
    p = randomize_zero_params(make_params(), 3)
    hi, lo = ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2)

    def f_hi(t):
        d, w = srb.subnet(t, lo, p, "blk")
        return ag.add(ag.sum(d), ag.sum(w))

    def f_lo(t):
        d, w = srb.subnet(hi, t, p, "blk")
        return ag.add(ag.sum(d), ag.sum(w))

    assert gradcheck(f_hi, hi) < 1e-5
    assert gradcheck(f_lo, lo) < 1e-5


def test_zero_offset_warp_is_bilinear_upsample():
    hi = ag.randn((2, C, 4, 5), seed=0)
    out = srb.warp(hi, ag.zeros((2, 2, 8, 10)))
    assert np.array_equal(out.data, ops.upsample2x("bilinear", hi).data)
    np.testing.assert_allclose(out.data, upsample_bilinear_naive(hi.data), atol=1e-14)


def test_unit_normalized_offset_shifts_one_coarse_pixel():
    hi = ag.randn((1, C, 6, 6), seed=0)
    h = w = 12
    base = srb.warp(hi, ag.zeros((1, 2, h, w))).data
    dx = np.zeros((1, 2, h, w))
    dx[:, 0] = (h + w) / 2  # normalized offset 2 * 12 / 24 = 1 coarse pixel in x
    shifted = srb.warp(hi, Tensor(dx)).data
    # fine column j reads coarse u(j) + 1 = u(j + 2); interior columns avoid both clamps
    assert np.array_equal(shifted[..., 1:w - 3], base[..., 3:w - 1])
    dy = np.zeros((1, 2, h, w))
    dy[:, 1] = (h + w) / 2
    shifted = srb.warp(hi, Tensor(dy)).data
    assert np.array_equal(shifted[:, :, 1:h - 3], base[:, :, 3:h - 1])


def test_warp_gradients():
    rng = np.random.default_rng(5)
    hi = ag.randn((1, 3, 4, 4), seed=0)
    delta = Tensor(rng.uniform(-2.0, 2.0, (1, 2, 8, 8)))
    loss = weighted_sum_loss((1, 3, 8, 8), 1)
    assert gradcheck(lambda t: loss(srb.warp(t, delta)), hi, eps=1e-5) < 1e-5
    assert gradcheck(lambda t: loss(srb.warp(hi, t)), delta, eps=1e-6) < 1e-5


def test_fuse_unit_weight_collapse():
    cfg = srb.SrbConfig(upsample="bilinear")
    p = make_params(cfg)
    identity_conv_out(p)
    hi, lo = ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2)
    f_tilde = srb.warp(hi, ag.zeros((1, 2, 8, 8)))
    out = srb.fuse(f_tilde, ag.full((1, 1, 8, 8), 1.0), hi, lo, p, "blk", cfg)
    up = ops.upsample2x("bilinear", hi).data
    np.testing.assert_allclose(out.data, 2 * up + lo.data, atol=1e-14)


def test_fuse_zero_weight():
    p = make_params()
    hi, lo = ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2)
    f_tilde = ag.randn((1, C, 8, 8), seed=3)
    out = srb.fuse(f_tilde, ag.zeros((1, 1, 8, 8)), hi, lo, p, "blk")
    expected = p.conv("blk.conv_out", ag.add(ops.upsample2x("nearest", hi), lo))
    np.testing.assert_allclose(out.data, expected.data, atol=1e-14)


def test_fuse_matches_reference(rng):
    p = make_params()
    for _ in range(5):
        hi, lo = Tensor(rng.standard_normal((2, C, 3, 4))), Tensor(rng.standard_normal((2, C, 6, 8)))
        f_tilde = Tensor(rng.standard_normal((2, C, 6, 8)))
        omega = Tensor(rng.uniform(0, 1, (2, 1, 6, 8)))
        out = srb.fuse(f_tilde, omega, hi, lo, p, "blk").data
        ref = srb_fuse_reference(f_tilde.data, omega.data, hi.data, lo.data,
                                 p["blk.conv_out.weight"].data, p["blk.conv_out.bias"].data)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_fuse_shape_errors():
    p = make_params()
    with pytest.raises(ShapeError):
        srb.fuse(ag.zeros((1, C, 8, 8)), ag.zeros((1, 1, 8, 8)), ag.zeros((1, C, 4, 4)), ag.zeros((1, C, 6, 6)), p, "blk")
    with pytest.raises(ShapeError):
        srb.fuse(ag.zeros((1, C, 8, 8)), ag.zeros((1, 2, 8, 8)), ag.zeros((1, C, 4, 4)), ag.zeros((1, C, 8, 8)), p, "blk")


def test_forward_zero_init_closed_form():
    p = make_params()
    hi, lo = ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 16, 16), seed=2)
    out = srb.forward(hi, lo, p, "blk")
    assert out.shape == (1, C, 16, 16)
    inner = 0.5 * ops.upsample2x("bilinear", hi).data + ops.upsample2x("nearest", hi).data + lo.data
    expected = p.conv("blk.conv_out", Tensor(inner)).data
    np.testing.assert_allclose(out.data, expected, atol=1e-13)


def test_omega_in_unit_interval():
    p = randomize_zero_params(make_params(), 0, scale=0.5)
    _, omega = srb.subnet(ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2), p, "blk")
    assert np.all((omega.data > 0) & (omega.data < 1))


def test_forward_gradients():
    p = randomize_zero_params(make_params(), 7, scale=0.2)
    hi, lo = ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2)
    loss = weighted_sum_loss((1, C, 8, 8), 3)
    assert gradcheck(lambda t: loss(srb.forward(t, lo, p, "blk")), hi) < 1e-4
    assert gradcheck(lambda t: loss(srb.forward(hi, t, p, "blk")), lo) < 1e-4


def test_single_offset_field_shared_across_channels():
    # an impulse in channel 0 and its copy in channel 1 are warped identically
    hi = np.zeros((1, 2, 4, 4))
    hi[0, :, 1, 2] = 1.0
    delta = Tensor(np.random.default_rng(0).uniform(-3, 3, (1, 2, 8, 8)))
    out = srb.warp(Tensor(hi), delta).data
    assert np.array_equal(out[0, 0], out[0, 1])


@pytest.mark.parametrize("cfg", [
    srb.SrbConfig(source="add"), srb.SrbConfig(source="target"), srb.SrbConfig(source="source"),
    srb.SrbConfig(shared_stem=False), srb.SrbConfig(offset=False), srb.SrbConfig(weight=False),
    srb.SrbConfig(offset=False, weight=False), srb.SrbConfig(subnet_relu=False),
])
def test_variants_count_and_run(cfg):
    p = make_params(cfg)
    assert p.count() == srb.num_params(C, cfg)
    out = srb.forward(ag.randn((1, C, 4, 4), seed=1), ag.randn((1, C, 8, 8), seed=2), p, "blk", cfg)
    assert out.shape == (1, C, 8, 8)


def test_downward_direction():
    p = randomize_zero_params(make_params(direction="down"), 1, scale=0.2)
    fine, coarse = ag.randn((1, C, 8, 8), seed=1), ag.randn((1, C, 4, 4), seed=2)
    out = srb.forward(fine, coarse, p, "blk")
    assert out.shape == (1, C, 4, 4)
    # the parameter-free branch of a downward merge is the 2x2 block mean
    down = srb.plain_resample(fine, (4, 4), "nearest").data
    np.testing.assert_allclose(down, fine.data.reshape(1, C, 4, 2, 4, 2).mean(axis=(3, 5)), atol=1e-15)
    loss = weighted_sum_loss((1, C, 4, 4), 0)
    assert gradcheck(lambda t: loss(srb.forward(t, coarse, p, "blk")), fine) < 1e-4
