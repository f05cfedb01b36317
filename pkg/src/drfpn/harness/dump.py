"""Feature-map export as 8-bit portable graymaps plus one CSV of raw values."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..params import ModelParams
from ..pyramid import LEVELS, Model
from .config import RunConfig
from .weights import atomic_write

INDEX_NAME = "features.csv"


def to_gray(fmap: np.ndarray) -> np.ndarray:
    """Min-max normalize one 2-D map to 0..255; a constant map becomes mid-gray."""
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi == lo:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    magic, dims, maxval, rest = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary graymap")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def map_name(level: int, channel: int) -> str:
    return f"P{level}_c{channel:03d}.pgm"


def dump_maps(maps: dict[int, np.ndarray], out_dir: str | Path, channels: Sequence[int]) -> list[Path]:
    """Write ``map_name(level, c)`` for each level and channel, plus the raw-value index."""
    out = Path(out_dir)
    written = []
    rows = ["level,channel,row,col,value\n"]
    for lvl in sorted(maps):
        fmap = maps[lvl]
        for c in channels:
            if not 0 <= c < fmap.shape[1]:
                raise IndexError(f"channel {c} out of range for P{lvl} with {fmap.shape[1]} channels")
            plane = fmap[0, c]
            path = out / map_name(lvl, c)
            try:
                atomic_write(path, encode_pgm(to_gray(plane)))
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc
            written.append(path)
            rows.extend(f"{lvl},{c},{i},{j},{float(plane[i, j])!r}\n"
                        for i in range(plane.shape[0]) for j in range(plane.shape[1]))
    index = out / INDEX_NAME
    try:
        atomic_write(index, "".join(rows))
    except OSError as exc:
        raise OSError(f"cannot write {index}: {exc}") from exc
    written.append(index)
    return written


def dump_features(params: ModelParams, cfg: RunConfig, image: np.ndarray, out_dir: str | Path,
                  channels: Sequence[int] = (0,)) -> list[Path]:
    with ag.no_grad():
        feats = Model(cfg.pyramid(), params)(Tensor(image))
    return dump_maps({lvl: feats[lvl].data for lvl in LEVELS}, out_dir, channels)


def read_index(path: str | Path) -> dict[tuple[int, int], np.ndarray]:
    """Rebuild each dumped map from the CSV index."""
    cells: dict[tuple[int, int], dict[tuple[int, int], float]] = {}
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            lvl, c, i, j, v = line.rstrip("\n").split(",")
            cells.setdefault((int(lvl), int(c)), {})[(int(i), int(j))] = float(v)
    out = {}
    for key, vals in cells.items():
        h = 1 + max(i for i, _ in vals)
        w = 1 + max(j for _, j in vals)
        arr = np.empty((h, w))
        for (i, j), v in vals.items():
            arr[i, j] = v
        out[key] = arr
    return out
