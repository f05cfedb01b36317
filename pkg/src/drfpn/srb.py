"""Spatial Refinement Block.

Merges a *source* map into a *target* map at the target's resolution.  A small
subnet looks at both levels and predicts a 2-channel offset field (where to
sample the source) and a 1-channel weight map (how much to trust the warped
sample).  In the usual top-down use the source is the coarser level; the block
also runs the other way (source twice as fine) for the alternative placement.

Offset channel 0 displaces the x (column) coordinate, channel 1 the y (row)
coordinate.  Raw offsets are scaled by ``2 / (H_t + W_t)`` and added in source
pixel units to the half-pixel resize grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import ShapeError
from .ops import ConvSpec
from .params import ModelParams, conv_size

SOURCES = ("cat", "add", "target", "source")


@dataclass(frozen=True)
class SrbConfig:
    ratio: int = 4
    upsample: str = "nearest"  # the plain up(.) branch of the fusion
    shared_stem: bool = True
    subnet_relu: bool = True
    offset: bool = True  # sampling-point offset head
    weight: bool = True  # global-information weight head
    source: str = "cat"  # subnet input: both levels concatenated, summed, or one level only

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown SRB subnet source {self.source!r}; expected one of {SOURCES}")
        if self.ratio < 1:
            raise ValueError("compression ratio must be positive")


def _direction(src: Tensor, dst: Tensor) -> str:
    (hs, ws), (hd, wd) = src.shape[2:], dst.shape[2:]
    if (hd, wd) == (2 * hs, 2 * ws):
        return "up"
    if (hs, ws) == (2 * hd, 2 * wd):
        return "down"
    raise ShapeError(f"SRB needs a 2:1 resolution pair, got source {src.shape} and target {dst.shape}")


def _uses_src(cfg: SrbConfig) -> bool:
    return cfg.source != "target"


def _uses_dst(cfg: SrbConfig) -> bool:
    return cfg.source != "source"


def _subnet_in(channels: int, cfg: SrbConfig) -> int:
    c = channels // cfg.ratio
    return 2 * c if cfg.source == "cat" else c


def declare(params: ModelParams, prefix: str, channels: int, cfg: SrbConfig, direction: str = "up") -> None:
    if channels % cfg.ratio:
        raise ShapeError(f"compression ratio {cfg.ratio} must divide channel count {channels}")
    c = channels // cfg.ratio
    if cfg.offset or cfg.weight:
        if _uses_src(cfg):
            params.declare_conv(f"{prefix}.compress_src", ConvSpec(channels, c, kernel=1))
            if direction == "up":
                params.declare_deconv(f"{prefix}.resample", c, c)
            else:
                params.declare_conv(f"{prefix}.resample", ConvSpec(c, c, kernel=3, stride=2))
        if _uses_dst(cfg):
            params.declare_conv(f"{prefix}.compress_dst", ConvSpec(channels, c, kernel=1))
        head_in = _subnet_in(channels, cfg)
        if cfg.shared_stem:
            params.declare_conv(f"{prefix}.stem", ConvSpec(head_in, c, kernel=3), relu=cfg.subnet_relu)
            head_in = c
        if cfg.offset:
            params.declare_conv(f"{prefix}.conv_delta", ConvSpec(head_in, 2, kernel=3), zero=True)
        if cfg.weight:
            params.declare_conv(f"{prefix}.conv_omega", ConvSpec(head_in, 1, kernel=3), zero=True)
    params.declare_conv(f"{prefix}.conv_out", ConvSpec(channels, channels, kernel=3))


def num_params(channels: int, cfg: SrbConfig) -> int:
    c = channels // cfg.ratio
    total = conv_size(channels, channels, 3)
    if not (cfg.offset or cfg.weight):
        return total
    if _uses_src(cfg):
        total += conv_size(channels, c, 1) + conv_size(c, c, 3)
    if _uses_dst(cfg):
        total += conv_size(channels, c, 1)
    head_in = _subnet_in(channels, cfg)
    if cfg.shared_stem:
        total += conv_size(head_in, c, 3)
        head_in = c
    if cfg.offset:
        total += conv_size(head_in, 2, 3)
    if cfg.weight:
        total += conv_size(head_in, 1, 3)
    return total


def subnet(f_src: Tensor, f_dst: Tensor, params: ModelParams, prefix: str,
           cfg: SrbConfig = SrbConfig()) -> tuple[Tensor | None, Tensor | None]:
    """Predict (delta, omega) at the target resolution; a disabled head yields None."""
    direction = _direction(f_src, f_dst)
    if f_src.shape[1] != f_dst.shape[1]:
        raise ShapeError(f"SRB levels must share channels: {f_src.shape} vs {f_dst.shape}")
    if not (cfg.offset or cfg.weight):
        return None, None
    feats = []
    if _uses_src(cfg):
        s = params.conv(f"{prefix}.compress_src", f_src)
        s = params.deconv(f"{prefix}.resample", s) if direction == "up" else params.conv(f"{prefix}.resample", s, 2)
        feats.append(s)
    if _uses_dst(cfg):
        feats.append(params.conv(f"{prefix}.compress_dst", f_dst))
    if cfg.source == "cat":
        x = ag.concat_channels(feats[0], feats[1])
    elif cfg.source == "add":
        x = ag.add(feats[0], feats[1])
    else:
        x = feats[0]
    if cfg.shared_stem:
        x = params.conv(f"{prefix}.stem", x)
        if cfg.subnet_relu:
            x = ag.relu(x)
    delta = params.conv(f"{prefix}.conv_delta", x) if cfg.offset else None
    omega = ag.sigmoid(params.conv(f"{prefix}.conv_omega", x)) if cfg.weight else None
    return delta, omega


def base_grid(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    return ops.resize_grid(src_hw[0], src_hw[1], dst_hw[0], dst_hw[1])


def warp(f_src: Tensor, delta: Tensor | None, dst_hw: tuple[int, int] | None = None) -> Tensor:
    """Sample ``f_src`` on the half-pixel grid of the target, displaced by the normalized offsets."""
    if delta is None:
        if dst_hw is None:
            raise ShapeError("warp needs either an offset field or a target size")
        return ops.resize_bilinear(f_src, *dst_hw)
    n, two, h, w = delta.shape
    if two != 2:
        raise ShapeError(f"offset field must have 2 channels, got {delta.shape}")
    if n != f_src.shape[0]:
        raise ShapeError(f"offset batch {n} does not match source batch {f_src.shape[0]}")
    if dst_hw is not None and (h, w) != tuple(dst_hw):
        raise ShapeError(f"offset field {delta.shape} does not match target size {dst_hw}")
    grid0 = Tensor(base_grid(f_src.shape[2:], (h, w)))
    grid = ag.add(ag.scale(delta, 2.0 / (h + w)), grid0)
    return ops.grid_sample_bilinear(f_src, grid)


def plain_resample(f_src: Tensor, dst_hw: tuple[int, int], kind: str) -> Tensor:
    if dst_hw == (2 * f_src.shape[2], 2 * f_src.shape[3]):
        return ops.upsample2x(kind, f_src)
    # downward: half-pixel bilinear at ratio 2 is the 2x2 block mean
    return ops.resize_bilinear(f_src, *dst_hw)


def fuse(f_tilde: Tensor, omega: Tensor | None, f_src: Tensor, f_dst: Tensor, params: ModelParams,
         prefix: str, cfg: SrbConfig = SrbConfig()) -> Tensor:
    """``conv_out((omega * f_tilde + resample(f_src)) + f_dst)``; ``omega=None`` means no weighting."""
    if f_tilde.shape != f_dst.shape:
        raise ShapeError(f"warped map {f_tilde.shape} does not match target {f_dst.shape}")
    x = f_tilde
    if omega is not None:
        if omega.shape != (f_dst.shape[0], 1) + f_dst.shape[2:]:
            raise ShapeError(f"weight map {omega.shape} does not match target {f_dst.shape}")
        x = ag.mul(f_tilde, omega)
    x = ag.add(x, plain_resample(f_src, f_dst.shape[2:], cfg.upsample))
    x = ag.add(x, f_dst)
    return params.conv(f"{prefix}.conv_out", x)


def forward(f_src: Tensor, f_dst: Tensor, params: ModelParams, prefix: str,
            cfg: SrbConfig = SrbConfig()) -> Tensor:
    delta, omega = subnet(f_src, f_dst, params, prefix, cfg)
    f_tilde = warp(f_src, delta, f_dst.shape[2:])
    return fuse(f_tilde, omega, f_src, f_dst, params, prefix, cfg)
