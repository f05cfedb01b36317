"""Run configuration and its plain-text ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..pyramid import PyramidConfig


@dataclass
class RunConfig:
    # pyramid architecture (desk-scale defaults)
    channels: int = 32
    in_channels: tuple[int, ...] = (16, 32, 64, 128)
    srb_enabled: bool = True
    crb_enabled: bool = True
    ppm_enabled: bool = True
    placement: str = "td_srb_bu_crb"
    ppm_bins: tuple[int, ...] = (1, 2)  # C5 is 2x2 at image_size=64
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
    # run
    seed: int = 0
    image_size: int = 64
    dataset_size: int = 32
    steps: int = 500
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0  # global gradient-norm cap; 0 disables
    log_every: int = 50
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.steps < 0 or self.dataset_size < 0:
            raise ConfigError("steps and dataset_size must be non-negative")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"need lr >= 0 and momentum in [0, 1), got lr={self.lr}, momentum={self.momentum}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be non-negative, got {self.grad_clip}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")
        self.in_channels = tuple(self.in_channels)
        self.ppm_bins = tuple(self.ppm_bins)
        self.backbone_channels = tuple(self.backbone_channels)

    def pyramid(self) -> PyramidConfig:
        names = {f.name for f in fields(PyramidConfig)}
        try:
            return PyramidConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind is bool:
            if raw not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    cfg.pyramid()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
