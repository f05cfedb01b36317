"""Toy backbone, pyramid pooling context, the plain FPN baseline and DRFPN.

Parameter names are shared between the FPN baseline and DRFPN (``lateral.<l>``,
``output.<l>``), so one registry drives both and DRFPN with every module
switched off reproduces the baseline bit for bit.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, fields
from functools import lru_cache

from . import autograd as ag
from . import crb, ops, srb
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .ops import ConvSpec
from .params import ModelParams, conv_size

LEVELS = (2, 3, 4, 5)
STRIDES = (4, 8, 16, 32)
PLACEMENTS = ("td_srb_bu_crb", "td_crb_bu_srb", "td_srb_crb")


@dataclass
class PyramidLevels:
    """Feature maps for levels 2..5 (strides 4, 8, 16, 32), finest first."""

    maps: list[Tensor]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ShapeError(f"expected 4 pyramid levels, got {len(self.maps)}")
        n = self.maps[0].shape[0]
        for fine, coarse in zip(self.maps, self.maps[1:]):
            if coarse.shape[0] != n:
                raise ShapeError("pyramid levels disagree on batch size")
            if fine.shape[2:] != (2 * coarse.shape[2], 2 * coarse.shape[3]):
                raise ShapeError(f"adjacent levels must differ by 2x: {fine.shape} vs {coarse.shape}")

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level - 2]

    def __iter__(self):
        return iter(self.maps)

    def shapes(self) -> list[tuple[int, int, int, int]]:
        return [m.shape for m in self.maps]


@dataclass
class PyramidConfig:
    channels: int = 256
    in_channels: tuple[int, ...] = (16, 32, 64, 128)
    srb_enabled: bool = True
    crb_enabled: bool = True
    ppm_enabled: bool = True
    placement: str = "td_srb_bu_crb"
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    srb_ratio: int = 4
    upsample: str = "nearest"
    srb_shared_stem: bool = True
    srb_subnet_relu: bool = True
    srb_offset: bool = True
    srb_weight: bool = True
    srb_source: str = "cat"
    crb_refine_kernel: int = 3
    crb_out_kernel: int = 3
    crb_gate_source: str = "low"
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        self.in_channels = tuple(self.in_channels)
        self.ppm_bins = tuple(self.ppm_bins)
        self.backbone_channels = tuple(self.backbone_channels)
        if self.placement not in PLACEMENTS:
            raise ContractError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if len(self.in_channels) != 4 or len(self.backbone_channels) != 4:
            raise ContractError("in_channels and backbone_channels need one entry per level")
        if self.ppm_enabled and self.in_channels[3] % len(self.ppm_bins):
            raise ContractError(f"PPM branch count {len(self.ppm_bins)} must divide C5 channels {self.in_channels[3]}")
        self.srb = srb.SrbConfig(
            ratio=self.srb_ratio, upsample=self.upsample, shared_stem=self.srb_shared_stem,
            subnet_relu=self.srb_subnet_relu, offset=self.srb_offset, weight=self.srb_weight,
            source=self.srb_source,
        )
        self.crb = crb.CrbConfig(
            refine_kernel=self.crb_refine_kernel, out_kernel=self.crb_out_kernel,
            gate_source=self.crb_gate_source, upsample=self.upsample,
        )

    def td_modules(self) -> list[str]:
        if self.placement == "td_srb_bu_crb":
            return ["srb"] if self.srb_enabled else []
        if self.placement == "td_crb_bu_srb":
            return ["crb"] if self.crb_enabled else []
        return [m for m, on in (("srb", self.srb_enabled), ("crb", self.crb_enabled)) if on]

    def bu_module(self) -> str | None:
        if self.placement == "td_srb_bu_crb":
            return "crb" if self.crb_enabled else None
        if self.placement == "td_crb_bu_srb":
            return "srb" if self.srb_enabled else None
        return None


# ------------------------------------------------------------ construction

def declare_backbone(params: ModelParams, channels: tuple[int, ...] = (16, 32, 64, 128)) -> None:
    params.declare_conv("backbone.stem", ConvSpec(3, channels[0], kernel=3, stride=2), relu=True)
    prev = channels[0]
    for i, c in enumerate(channels, start=1):
        params.declare_conv(f"backbone.stage{i}", ConvSpec(prev, c, kernel=3, stride=2), relu=True)
        prev = c


def declare_neck(params: ModelParams, cfg: PyramidConfig) -> None:
    c = cfg.channels
    c5 = cfg.in_channels[3]
    for lvl, cin in zip(LEVELS, cfg.in_channels):
        if lvl == 5 and cfg.ppm_enabled:
            continue  # the PPM context seeds the top level instead
        params.declare_conv(f"lateral.{lvl}", ConvSpec(cin, c, kernel=1))
    if cfg.ppm_enabled:
        branch = c5 // len(cfg.ppm_bins)
        for b in cfg.ppm_bins:
            params.declare_conv(f"ppm.branch{b}", ConvSpec(c5, branch, kernel=1), relu=True)
        params.declare_conv("ppm.bottleneck", ConvSpec(c5 + branch * len(cfg.ppm_bins), c, kernel=1))
        params.declare_conv("ppm.reduce", ConvSpec(c + c5, c, kernel=1))
    for lvl in (4, 3, 2):
        for m in cfg.td_modules():
            _declare_block(params, f"td.{lvl}.{m}", m, c, cfg, "up")
    bu = cfg.bu_module()
    if bu is not None:
        for lvl in (3, 4, 5):
            _declare_block(params, f"bu.{lvl}.{bu}", bu, c, cfg, "down")
    for lvl in LEVELS:
        params.declare_conv(f"output.{lvl}", ConvSpec(c, c, kernel=3))


def _declare_block(params, prefix, module, c, cfg, direction):
    if module == "srb":
        srb.declare(params, prefix, c, cfg.srb, direction)
    else:
        crb.declare(params, prefix, c, cfg.crb, "down" if direction == "down" else "up")


def build_params(cfg: PyramidConfig, seed: int = 0, backbone: bool = True) -> ModelParams:
    """Deterministic registry for ``cfg``: same config and seed give bitwise-identical tensors."""
    params = ModelParams(seed)
    if backbone:
        declare_backbone(params, cfg.backbone_channels)
    declare_neck(params, cfg)
    return params


def param_count(cfg: PyramidConfig, backbone: bool = False) -> dict[str, int]:
    """Closed-form parameter counts per module (independent of the registry and of input size)."""
    c = cfg.channels
    c5 = cfg.in_channels[3]
    counts = {}
    if backbone:
        bc = cfg.backbone_channels
        n = conv_size(3, bc[0], 3)
        prev = bc[0]
        for ch in bc:
            n += conv_size(prev, ch, 3)
            prev = ch
        counts["backbone"] = n
    lateral = [conv_size(cin, c, 1) for cin in cfg.in_channels]
    if cfg.ppm_enabled:
        lateral = lateral[:3]
        nb = len(cfg.ppm_bins)
        branch = c5 // nb
        counts["ppm"] = nb * conv_size(c5, branch, 1) + conv_size(c5 + branch * nb, c, 1) + conv_size(c + c5, c, 1)
    else:
        counts["ppm"] = 0
    counts["lateral"] = sum(lateral)
    block = {
        ("srb", "up"): srb.num_params(c, cfg.srb),
        ("srb", "down"): srb.num_params(c, cfg.srb),
        ("crb", "up"): crb.num_params(c, cfg.crb, "up"),
        ("crb", "down"): crb.num_params(c, cfg.crb, "down"),
    }
    counts["topdown"] = 3 * sum(block[(m, "up")] for m in cfg.td_modules())
    bu = cfg.bu_module()
    counts["bottomup"] = 3 * block[(bu, "down")] if bu else 0
    counts["output"] = 4 * conv_size(c, c, 3)
    counts["total"] = sum(counts.values())
    return counts


# ----------------------------------------------------------------- forward

class StageTimer:
    """Wall-clock accumulator keyed by stage name (used by the benchmark)."""

    def __init__(self):
        self.totals: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0.0) + time.perf_counter() - t0


@contextmanager
def _noop(name: str):
    yield


def toy_backbone(image: Tensor, params: ModelParams) -> PyramidLevels:
    n, c, h, w = image.shape
    if c != 3:
        raise ShapeError(f"backbone expects 3 input channels, got {c}")
    if h % 32 or w % 32:
        raise ShapeError(f"image extent {h}x{w} must be divisible by 32")
    x = ag.relu(params.conv("backbone.stem", image, stride=2))
    maps = []
    for i in range(1, 5):
        x = ag.relu(params.conv(f"backbone.stage{i}", x, stride=2))
        maps.append(x)
    return PyramidLevels(maps)


def ppm_forward(c5: Tensor, params: ModelParams, bins: tuple[int, ...]) -> Tensor:
    """Pyramid pooling: pooled branches resized back and concatenated after ``c5``, then a 1x1 bottleneck."""
    h, w = c5.shape[2:]
    for b in bins:
        if b > min(h, w):
            raise ContractError(f"PPM bin {b} exceeds the {h}x{w} top-level map")
    branches = [c5]
    for b in bins:
        y = ag.relu(params.conv(f"ppm.branch{b}", ops.adaptive_avg_pool(c5, b)))
        branches.append(ops.resize_bilinear(y, h, w))
    return params.conv("ppm.bottleneck", ag.cat(branches))


def _laterals(levels: PyramidLevels, params: ModelParams, skip_top: bool = False) -> list[Tensor | None]:
    out = []
    for lvl in LEVELS:
        if lvl == 5 and skip_top:
            out.append(None)
        else:
            out.append(params.conv(f"lateral.{lvl}", levels[lvl]))
    return out


def fpn_forward(levels: PyramidLevels, params: ModelParams, upsample: str = "nearest") -> PyramidLevels:
    """Baseline FPN: 1x1 laterals, top-down upsample-and-add, 3x3 output conv per level."""
    lat = _laterals(levels, params)
    p = [None, None, None, lat[3]]
    for i in (2, 1, 0):
        p[i] = ag.add(ops.upsample2x(upsample, p[i + 1]), lat[i])
    return PyramidLevels([params.conv(f"output.{lvl}", p[i]) for i, lvl in enumerate(LEVELS)])


def _merge(module: str, src: Tensor, dst: Tensor, params: ModelParams, prefix: str, cfg: PyramidConfig) -> Tensor:
    if module == "srb":
        return srb.forward(src, dst, params, f"{prefix}.srb", cfg.srb)
    return crb.forward(src, dst, params, f"{prefix}.crb", cfg.crb)


def drfpn_forward(levels: PyramidLevels, cfg: PyramidConfig, params: ModelParams,
                  timer: StageTimer | None = None) -> PyramidLevels:
    """Full DRFPN: optional PPM seed, top-down refinement, FPN output convs, bottom-up refinement."""
    stage = timer if timer is not None else _noop
    _check_registry(params, cfg)
    with stage("lateral"):
        lat = _laterals(levels, params, skip_top=cfg.ppm_enabled)
    if cfg.ppm_enabled:
        with stage("ppm"):
            ctx = ppm_forward(levels[5], params, cfg.ppm_bins)
            lat[3] = params.conv("ppm.reduce", ag.concat_channels(ctx, levels[5]))

    p = [None, None, None, lat[3]]
    td = cfg.td_modules()
    with stage("topdown"):
        for i, lvl in ((2, 4), (1, 3), (0, 2)):
            if not td:
                p[i] = ag.add(ops.upsample2x(cfg.upsample, p[i + 1]), lat[i])
                continue
            merged = lat[i]
            for m in td:
                merged = _merge(m, p[i + 1], merged, params, f"td.{lvl}", cfg)
            p[i] = merged

    with stage("output"):
        outs = [params.conv(f"output.{lvl}", p[i]) for i, lvl in enumerate(LEVELS)]

    bu = cfg.bu_module()
    if bu is None:
        return PyramidLevels(outs)
    with stage("bottomup"):
        n = [outs[0]]
        for i, lvl in ((1, 3), (2, 4), (3, 5)):
            n.append(_merge(bu, n[-1], outs[i], params, f"bu.{lvl}", cfg))
    return PyramidLevels(n)


def _config_key(cfg: PyramidConfig) -> tuple:
    return tuple(getattr(cfg, f.name) for f in fields(cfg))


@lru_cache(maxsize=32)
def _neck_shapes(key: tuple) -> dict[str, tuple[int, ...]]:
    expected = ModelParams()
    declare_neck(expected, PyramidConfig(*key))
    return expected.shapes()


def neck_shapes(cfg: PyramidConfig) -> dict[str, tuple[int, ...]]:
    return dict(_neck_shapes(_config_key(cfg)))


def _check_registry(params: ModelParams, cfg: PyramidConfig) -> None:
    for name, shape in _neck_shapes(_config_key(cfg)).items():
        if name not in params:
            raise ContractError(f"parameter {name} required by the configuration is missing")
        if params[name].shape != shape:
            raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


@dataclass
class Model:
    """Backbone plus neck, bound to one configuration and registry."""

    cfg: PyramidConfig
    params: ModelParams
    kind: str = "drfpn"  # or "fpn"

    def __call__(self, image: Tensor, timer: StageTimer | None = None) -> PyramidLevels:
        stage = timer if timer is not None else _noop
        with stage("backbone"):
            levels = toy_backbone(image, self.params)
        if self.kind == "fpn":
            with stage("neck"):
                return fpn_forward(levels, self.params, self.cfg.upsample)
        return drfpn_forward(levels, self.cfg, self.params, timer)
