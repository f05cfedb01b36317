"""Toy heatmap-regression training and evaluation on top of the pyramid outputs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..errors import ContractError, DrfpnError
from ..ops import ConvSpec
from ..optim import SGD, clip_grad_norm
from ..params import ModelParams
from ..pyramid import LEVELS, Model, build_params, declare_backbone, declare_neck
from .config import RunConfig
from .data import SyntheticSample, gen_dataset, local_maxima
from .weights import atomic_write


class TrainingDiverged(DrfpnError, ArithmeticError):
    """The loss became non-finite; carries the offending step."""

    def __init__(self, message: str, step: int, dump_path: Path | None = None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path


def declare_heads(params: ModelParams, channels: int) -> None:
    for lvl in LEVELS:
        params.declare_conv(f"head.{lvl}", ConvSpec(channels, 1, kernel=3))


def init_params(cfg: RunConfig) -> ModelParams:
    params = build_params(cfg.pyramid(), cfg.seed)
    declare_heads(params, cfg.channels)
    return params


def expected_shapes(cfg: RunConfig) -> dict[str, tuple[int, ...]]:
    params = ModelParams()
    pyr = cfg.pyramid()
    declare_backbone(params, pyr.backbone_channels)
    declare_neck(params, pyr)
    declare_heads(params, cfg.channels)
    return params.shapes()


def check_architecture(params: ModelParams, cfg: RunConfig) -> None:
    want = expected_shapes(cfg)
    for name, shape in want.items():
        if name not in params:
            raise ContractError(f"parameter {name} is missing for this configuration")
        if params[name].shape != shape:
            raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    extra = [n for n in params if n not in want]
    if extra:
        raise ContractError(f"parameter {extra[0]} is not part of this configuration")


def predict(params: ModelParams, cfg: RunConfig, image: np.ndarray) -> dict[int, Tensor]:
    feats = Model(cfg.pyramid(), params)(Tensor(image))
    return {lvl: params.conv(f"head.{lvl}", feats[lvl]) for lvl in LEVELS}


def sample_loss(params: ModelParams, cfg: RunConfig, sample: SyntheticSample) -> Tensor:
    """Sum over levels of the per-level mean squared error."""
    preds = predict(params, cfg, sample.image)
    total = None
    for lvl in LEVELS:
        term = ag.mse(preds[lvl], Tensor(sample.targets[lvl]))
        total = term if total is None else ag.add(total, term)
    return total


def dataset_loss(params: ModelParams, cfg: RunConfig, dataset: Sequence[SyntheticSample]) -> float:
    if not dataset:
        return float("nan")
    with ag.no_grad():
        return float(np.mean([sample_loss(params, cfg, s).item() for s in dataset]))


@dataclass
class TrainReport:
    params: ModelParams
    initial_loss: float
    final_loss: float
    log: list[tuple[int, float]] = field(default_factory=list)  # (step, loss of that step's sample)

    def log_csv(self) -> str:
        return "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in self.log)


def _dump_divergence(out_dir, step, loss, sample_index, params) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_step{step}.json"
    info = {
        "step": step,
        "loss": repr(loss),
        "sample_index": sample_index,
        "param_abs_max": {n: repr(float(np.max(np.abs(t.data)))) for n, t in params.items()},
    }
    atomic_write(path, json.dumps(info, indent=1))
    return path


def train(cfg: RunConfig, dataset: Sequence[SyntheticSample] | None = None,
          params: ModelParams | None = None, out_dir: str | Path | None = None,
          on_log: Callable[[int, float], None] | None = None) -> TrainReport:
    """SGD with momentum and global gradient-norm clipping, batch 1, cycling through the dataset in order.

    ``initial_loss`` and ``final_loss`` are mean losses over the whole dataset before
    and after training; the per-step log holds the loss of the sample used at each step.
    """
    if dataset is None:
        dataset = gen_dataset(cfg.seed, cfg.dataset_size, cfg.image_size)
    if cfg.steps and not dataset:
        raise ContractError("cannot train on an empty dataset")
    params = init_params(cfg) if params is None else params
    check_architecture(params, cfg)
    opt = SGD(params, cfg.lr, cfg.momentum)
    initial = dataset_loss(params, cfg, dataset)
    log = []
    for step in range(cfg.steps):
        idx = step % len(dataset)
        with ag.Tape():
            loss = sample_loss(params, cfg, dataset[idx])
            value = loss.item()
            if not math.isfinite(value):
                dump = _dump_divergence(out_dir, step, value, idx, params)
                where = f"; diagnostics in {dump}" if dump else ""
                raise TrainingDiverged(f"non-finite loss {value} at step {step} (sample {idx}){where}", step, dump)
            grads = ag.backward(loss)
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        opt.step(grads)
        log.append((step, value))
        if on_log is not None and cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            on_log(step, value)
    final = dataset_loss(params, cfg, dataset) if cfg.steps else initial
    return TrainReport(params, initial, final, log)


def evaluate_predictions(preds: Sequence[dict[int, np.ndarray]], dataset: Sequence[SyntheticSample]) -> dict[str, float]:
    """Per-level MSE and peak hit-rate.

    A target peak is hit when one of the top-k local maxima of the prediction (k =
    number of target peaks at that level) lies within Chebyshev distance 1.
    """
    if len(preds) != len(dataset):
        raise ContractError("need one prediction per sample")
    metrics: dict[str, float] = {}
    hits = total = 0
    for lvl in LEVELS:
        errs = [float(np.mean((np.asarray(p[lvl]) - s.targets[lvl]) ** 2)) for p, s in zip(preds, dataset)]
        metrics[f"mse_p{lvl}"] = float(np.mean(errs)) if errs else float("nan")
        for p, s in zip(preds, dataset):
            peaks = s.peaks(lvl)
            if not peaks:
                continue
            found = local_maxima(np.asarray(p[lvl]), len(peaks))
            for r, c in peaks:
                hits += any(max(abs(r - a), abs(c - b)) <= 1 for a, b in found)
            total += len(peaks)
    metrics["mse_total"] = sum(metrics[f"mse_p{lvl}"] for lvl in LEVELS)
    # no peaks means nothing can be missed
    metrics["hit_rate"] = hits / total if total else 1.0
    return metrics


def evaluate(params: ModelParams, cfg: RunConfig, dataset: Sequence[SyntheticSample]) -> dict[str, float]:
    check_architecture(params, cfg)
    with ag.no_grad():
        preds = [{lvl: t.data for lvl, t in predict(params, cfg, s.image).items()} for s in dataset]
    return evaluate_predictions(preds, dataset)


def metrics_csv(metrics: dict[str, float]) -> str:
    return "metric,value\n" + "".join(f"{k},{float(v)!r}\n" for k, v in metrics.items())
