"""Structured layer kernels: convolution, transposed convolution, resampling, pooling.

Resampling uses half-pixel-center alignment throughout: output pixel ``j`` of a
resize from ``W_in`` to ``W_out`` reads source coordinate
``(j + 0.5) * W_in / W_out - 0.5``, clamped to the source extent.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, make_result
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel counts must be positive: {self}")
        if self.kernel not in (1, 3) or self.stride not in (1, 2):
            raise ShapeError(f"unsupported conv geometry: {self}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        if self.padding < 0:
            raise ShapeError(f"negative padding: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def num_params(self) -> int:
        k = self.kernel
        return self.out_channels * self.in_channels * k * k + (self.out_channels if self.has_bias else 0)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output extent < 1 for input {h}x{w} and {self}")
        return ho, wo


# ------------------------------------------------------------- raw kernels

def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def conv2d_forward_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[2]
    n, c, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, k, stride, ho, wo)  # n, c, ho, wo, k, k
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input_raw(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int],
                              stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward_raw` with respect to its input."""
    n, _, ho, wo = g.shape
    c, k = w.shape[1], w.shape[2]
    h, wd = in_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # n, ho, wo, c, k, k
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                cols[..., i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def conv2d_backward_weight_raw(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, k, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # o, c, k, k


# --------------------------------------------------------------- conv ops

def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"bias shape {bias.shape} does not match (1, {spec.out_channels}, 1, 1)")
    spec.output_size(x.shape[2], x.shape[3])
    s, p, k = spec.stride, spec.padding, spec.kernel
    xd, wd = x.data, weight.data
    out = conv2d_forward_raw(xd, wd, s, p)
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = conv2d_backward_input_raw(g, wd, xd.shape[2:], s, p) if x.requires_grad else None
        gw = conv2d_backward_weight_raw(xd, g, k, s, p) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 stride-2 transposed convolution (padding 1, output padding 1): exactly doubles H and W.

    ``weight`` has shape (in_c, out_c, 3, 3); the forward pass is the
    input-gradient of the matching stride-2 convolution.
    """
    if weight.shape[0] != x.shape[1] or weight.shape[2:] != (3, 3):
        raise ShapeError(f"transposed conv weight {weight.shape} incompatible with input {x.shape}")
    out_c = weight.shape[1]
    if bias is not None and bias.shape != (1, out_c, 1, 1):
        raise ShapeError(f"bias shape {bias.shape} does not match (1, {out_c}, 1, 1)")
    xd, wd = x.data, weight.data
    h2, w2 = 2 * x.shape[2], 2 * x.shape[3]
    out = conv2d_backward_input_raw(xd, wd, (h2, w2), 2, 1)
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = conv2d_forward_raw(g, wd, 2, 1) if x.requires_grad else None
        gw = conv2d_backward_weight_raw(g, xd, 3, 2, 1) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward)


# ------------------------------------------------------------ resampling

def _bilinear_setup(u: np.ndarray, v: np.ndarray, h: int, w: int):
    uc = np.clip(u, 0.0, w - 1)
    vc = np.clip(v, 0.0, h - 1)
    x0 = np.minimum(np.floor(uc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0
    return x0, x1, y0, y1, fx, fy


def _bilinear_sample(src: np.ndarray, grid: np.ndarray, need_grid_grad: bool):
    """Forward pass plus a closure producing (d_src, d_grid)."""
    n, c, h, w = src.shape
    u, v = grid[:, 0], grid[:, 1]
    x0, x1, y0, y1, fx, fy = _bilinear_setup(u, v, h, w)
    s = src.transpose(0, 2, 3, 1)  # n, h, w, c
    b = np.arange(n)[:, None, None]
    s00, s01 = s[b, y0, x0], s[b, y0, x1]
    s10, s11 = s[b, y1, x0], s[b, y1, x1]
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out = w00 * s00 + w01 * s01 + w10 * s10 + w11 * s11
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g: np.ndarray):
        gt = g.transpose(0, 2, 3, 1)  # n, ho, wo, c
        gs = np.zeros((n, h, w, c), dtype=g.dtype)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gs, (np.broadcast_to(b, yy.shape), yy, xx), gt * ww)
        d_src = np.ascontiguousarray(gs.transpose(0, 3, 1, 2))
        d_grid = None
        if need_grid_grad:
            du = (1 - fy)[..., None] * (s01 - s00) + fy[..., None] * (s11 - s10)
            dv = (1 - fx)[..., None] * (s10 - s00) + fx[..., None] * (s11 - s01)
            gu = (gt * du).sum(axis=-1) * ((u > 0) & (u < w - 1))
            gv = (gt * dv).sum(axis=-1) * ((v > 0) & (v < h - 1))
            d_grid = np.stack([gu, gv], axis=1)
        return d_src, d_grid

    return out, backward


def grid_sample_bilinear(src: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``src`` at per-pixel source coordinates.

    ``grid`` has shape (N, 2, H_out, W_out); channel 0 is the x (column)
    coordinate and channel 1 the y (row) coordinate, in source pixel units.
    Coordinates are clamped to the source extent before weighting, so
    out-of-range samples repeat the border.  Differentiable in both inputs.
    """
    if grid.shape[1] != 2:
        raise ShapeError(f"grid must have 2 channels, got {grid.shape}")
    if grid.shape[0] != src.shape[0]:
        raise ShapeError(f"grid batch {grid.shape[0]} does not match source batch {src.shape[0]}")
    if not np.all(np.isfinite(grid.data)):
        raise ContractError("sample grid contains non-finite coordinates")
    out, bw = _bilinear_sample(src.data, grid.data, grid.requires_grad)

    def backward(g):
        d_src, d_grid = bw(g)
        return (d_src if src.requires_grad else None, d_grid)

    return make_result(out, (src, grid), backward)


@lru_cache(maxsize=64)
def resize_grid(in_h: int, in_w: int, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel source coordinates for resizing (in_h, in_w) to (out_h, out_w); shape (1, 2, out_h, out_w)."""
    u = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    v = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    grid = np.empty((1, 2, out_h, out_w))
    grid[0, 0] = u[None, :]
    grid[0, 1] = v[:, None]
    grid.setflags(write=False)
    return grid


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, _, h, w = x.shape
    grid = np.broadcast_to(resize_grid(h, w, out_h, out_w), (n, 2, out_h, out_w))
    out, bw = _bilinear_sample(x.data, grid, False)
    return make_result(out, (x,), lambda g: (bw(g)[0],))


def upsample2x(kind: str, x: Tensor) -> Tensor:
    if kind == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        n, c, h, w = x.shape
        return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
    if kind == "bilinear":
        return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])
    raise ContractError(f"unknown upsample kind {kind!r}")


# ----------------------------------------------------------------- pooling

def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def _bin_edges(size: int, bins: int) -> list[tuple[int, int]]:
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average over a bins x bins partition; bin i spans [floor(i*H/b), ceil((i+1)*H/b))."""
    n, c, h, w = x.shape
    if bins < 1 or bins > h or bins > w:
        raise ContractError(f"cannot pool a {h}x{w} map into {bins}x{bins} bins")
    if bins == 1:
        return global_avg_pool(x)
    rows, cols = _bin_edges(h, bins), _bin_edges(w, bins)
    out = np.empty((n, c, bins, bins), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (gx,)

    return make_result(out, (x,), backward)
