"""Median-of-k forward/backward timing for DRFPN and the plain-FPN baseline."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..pyramid import LEVELS, Model, StageTimer, build_params
from .config import RunConfig


@dataclass
class Timing:
    forward_ms: float
    backward_ms: float
    stages_ms: dict[str, float] = field(default_factory=dict)  # forward breakdown, medians

    @property
    def total_ms(self) -> float:
        return self.forward_ms + self.backward_ms


def _time_model(cfg: RunConfig, repeats: int, warmup: int) -> Timing:
    pyr = cfg.pyramid()
    params = build_params(pyr, cfg.seed)
    model = Model(pyr, params)
    image = Tensor(np.random.default_rng(cfg.seed).standard_normal((1, 3, cfg.image_size, cfg.image_size)))
    fwd, bwd, stages = [], [], []
    for i in range(warmup + repeats):
        timer = StageTimer()
        with ag.Tape():
            t0 = time.perf_counter()
            out = model(image, timer)
            loss = ag.sum(out[LEVELS[0]])
            for lvl in LEVELS[1:]:
                loss = ag.add(loss, ag.sum(out[lvl]))
            t1 = time.perf_counter()
            ag.backward(loss)
            t2 = time.perf_counter()
        if i >= warmup:
            fwd.append(t1 - t0)
            bwd.append(t2 - t1)
            stages.append(timer.totals)
    names = list(stages[0]) if stages else []
    return Timing(
        1e3 * statistics.median(fwd), 1e3 * statistics.median(bwd),
        {n: 1e3 * statistics.median(s.get(n, 0.0) for s in stages) for n in names},
    )


@dataclass
class BenchReport:
    drfpn: Timing
    fpn: Timing
    repeats: int

    @property
    def ratio(self) -> float:
        return self.drfpn.forward_ms / self.fpn.forward_ms

    def lines(self) -> list[str]:
        out = [f"median of {self.repeats} runs"]
        for label, t in (("drfpn", self.drfpn), ("fpn", self.fpn)):
            out.append(f"{label}: forward {t.forward_ms:.3f} ms, backward {t.backward_ms:.3f} ms")
            out.extend(f"  {name:<10} {ms:.3f} ms" for name, ms in t.stages_ms.items())
        out.append(f"drfpn/fpn forward ratio: {format_ratio(self.ratio)}")
        return out

    def csv(self) -> str:
        rows = ["model,stage,ms\n"]
        for label, t in (("drfpn", self.drfpn), ("fpn", self.fpn)):
            rows.append(f"{label},forward,{t.forward_ms!r}\n")
            rows.append(f"{label},backward,{t.backward_ms!r}\n")
            rows.extend(f"{label},{n},{ms!r}\n" for n, ms in t.stages_ms.items())
        rows.append(f"ratio,forward,{format_ratio(self.ratio)}\n")
        return "".join(rows)


def format_ratio(x: float) -> str:
    return f"{x:#.3g}"  # keeps trailing zeros: 2.50, not 2.5


def bench(cfg: RunConfig, repeats: int = 5, warmup: int = 1) -> BenchReport:
    if repeats < 1:
        raise ValueError("need at least one timed repeat")
    fpn_cfg = cfg.replace(srb_enabled=False, crb_enabled=False, ppm_enabled=False)
    return BenchReport(_time_model(cfg, repeats, warmup), _time_model(fpn_cfg, repeats, warmup), repeats)
