"""Channel Refinement Block.

A gate vector pooled from one level (the *source*, by default the finer one in
the bottom-up pathway) re-weights the channels of the refined target level
before the resampled source is added:

    alpha = sigmoid(conv_gate(GAP(source)))
    out   = conv_out(conv_refine(target) * alpha + resample(source))

``resample`` is a learned 3x3 stride-2 convolution when the source is twice as
fine as the target, and a parameter-free 2x upsample when it is twice as coarse
(top-down placement).
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .errors import ShapeError
from .ops import ConvSpec
from .params import ModelParams, conv_size

GATE_SOURCES = ("low", "high", "add", "cat")


@dataclass(frozen=True)
class CrbConfig:
    refine_kernel: int = 3
    out_kernel: int = 3
    gate_source: str = "low"  # "low" = the source level; "high" = the target level
    upsample: str = "nearest"

    def __post_init__(self):
        if self.gate_source not in GATE_SOURCES:
            raise ValueError(f"unknown gate source {self.gate_source!r}; expected one of {GATE_SOURCES}")
        if self.refine_kernel not in (1, 3) or self.out_kernel not in (1, 3):
            raise ValueError("CRB kernels must be 1 or 3")


def _direction(src: Tensor, dst: Tensor) -> str:
    (hs, ws), (hd, wd) = src.shape[2:], dst.shape[2:]
    if (hs, ws) == (2 * hd, 2 * wd):
        return "down"
    if (hd, wd) == (2 * hs, 2 * ws):
        return "up"
    raise ShapeError(f"CRB needs a 2:1 resolution pair, got source {src.shape} and target {dst.shape}")


def declare(params: ModelParams, prefix: str, channels: int, cfg: CrbConfig, direction: str = "down") -> None:
    c = channels
    gate_in = 2 * c if cfg.gate_source == "cat" else c
    params.declare_conv(f"{prefix}.conv_gate", ConvSpec(gate_in, c, kernel=1), zero=True)
    params.declare_conv(f"{prefix}.conv_refine", ConvSpec(c, c, kernel=cfg.refine_kernel))
    if direction == "down":
        params.declare_conv(f"{prefix}.conv_down", ConvSpec(c, c, kernel=3, stride=2))
    params.declare_conv(f"{prefix}.conv_out", ConvSpec(c, c, kernel=cfg.out_kernel))


def num_params(channels: int, cfg: CrbConfig, direction: str = "down") -> int:
    c = channels
    gate_in = 2 * c if cfg.gate_source == "cat" else c
    total = conv_size(gate_in, c, 1) + conv_size(c, c, cfg.refine_kernel) + conv_size(c, c, cfg.out_kernel)
    if direction == "down":
        total += conv_size(c, c, 3)
    return total


def resample(p_src: Tensor, p_dst: Tensor, params: ModelParams, prefix: str, cfg: CrbConfig) -> Tensor:
    if _direction(p_src, p_dst) == "down":
        return params.conv(f"{prefix}.conv_down", p_src, stride=2)
    return ops.upsample2x(cfg.upsample, p_src)


def gate(p_src: Tensor, params: ModelParams, prefix: str, cfg: CrbConfig = CrbConfig(),
         p_dst: Tensor | None = None, resampled: Tensor | None = None) -> Tensor:
    """Channel gate alpha of shape (N, C, 1, 1), values in (0, 1).

    With the default ``gate_source="low"`` only ``p_src`` is read.  The other
    settings need the target map (and, for "add"/"cat", the resampled source).
    """
    if cfg.gate_source == "low":
        pooled_in = p_src
    elif cfg.gate_source == "high":
        pooled_in = p_dst
    elif cfg.gate_source == "add":
        pooled_in = ag.add(resampled, p_dst)
    else:
        pooled_in = ag.concat_channels(resampled, p_dst)
    pooled = ops.global_avg_pool(pooled_in)
    return ag.sigmoid(params.conv(f"{prefix}.conv_gate", pooled))


def fuse(p_src: Tensor, p_dst: Tensor, alpha: Tensor, params: ModelParams, prefix: str,
         cfg: CrbConfig = CrbConfig(), resampled: Tensor | None = None) -> Tensor:
    """``conv_out(conv_refine(p_dst) * alpha + resample(p_src))``."""
    if p_src.shape[1] != p_dst.shape[1]:
        raise ShapeError(f"CRB levels must share channels: {p_src.shape} vs {p_dst.shape}")
    _direction(p_src, p_dst)
    if alpha.shape != p_dst.shape[:2] + (1, 1):
        raise ShapeError(f"gate {alpha.shape} does not match target {p_dst.shape}")
    if resampled is None:
        resampled = resample(p_src, p_dst, params, prefix, cfg)
    x = ag.mul(params.conv(f"{prefix}.conv_refine", p_dst), alpha)
    x = ag.add(x, resampled)
    return params.conv(f"{prefix}.conv_out", x)


def forward(p_src: Tensor, p_dst: Tensor, params: ModelParams, prefix: str,
            cfg: CrbConfig = CrbConfig()) -> Tensor:
    resampled = resample(p_src, p_dst, params, prefix, cfg)
    alpha = gate(p_src, params, prefix, cfg, p_dst=p_dst, resampled=resampled)
    return fuse(p_src, p_dst, alpha, params, prefix, cfg, resampled=resampled)
