"""Scaled experiments on the synthetic corridor, shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .dataset import horizon_to_windowspec, prepare
from .evaluation import MetricsReport, evaluate
from .models import ModelConfig
from .synth import SynthConfig, generate_corridor
from .training import TrainConfig, TrainResult, train

# Model size used for desk-scale runs; the full defaults (64 hidden, 4 heads)
# train about four times slower on a laptop CPU without changing the ranking.
DESK_MODEL = dict(hidden=32, heads=2, head_dim=8, kernel=3, conv_channels=16)


@dataclass
class RunOutcome:
    kind: str
    seed: int
    result: TrainResult
    reports: dict[str, MetricsReport]
    seconds: float


def run_synthetic(kind: str, synth: SynthConfig, horizon_minutes: int = 30, epochs: int = 100,
                  model: dict | None = None, batch_size: int = 32, progress=None) -> RunOutcome:
    """Generate a corridor, train one model on it and report train/val/test metrics in mph."""
    start = time.perf_counter()
    out = generate_corridor(synth)
    spec = horizon_to_windowspec(horizon_minutes)
    mc = ModelConfig(kind=kind, history=spec.history, horizon=spec.horizon, seed=synth.seed,
                     **(DESK_MODEL if model is None else model))
    data = prepare(out.observation_tensor(), spec, mc.n_features)
    mask = out.graph.attention_mask()
    tc = TrainConfig(epochs=epochs, batch_size=batch_size, seed=synth.seed)
    result = train(mc, data.train, data.val, mask, tc, progress=progress)
    reports = {name: evaluate(mc, result.params, ds, mask, data.stats)
               for name, ds in (("train", data.train), ("val", data.val), ("test", data.test))}
    return RunOutcome(kind, synth.seed, result, reports, time.perf_counter() - start)


@dataclass
class BenefitRow:
    seed: int
    mape_mstgat: float
    mape_stgat: float

    @property
    def relative_reduction(self) -> float:
        return (self.mape_stgat - self.mape_mstgat) / self.mape_stgat


def exogenous_benefit(seeds, synth: SynthConfig | None = None, epochs: int = 60,
                      model: dict | None = None, progress=None) -> list[BenefitRow]:
    """Test-set MAPE of M-STGAT against the speed-only STGAT on the same corridor per seed."""
    base = synth or SynthConfig()
    rows = []
    for seed in seeds:
        cfg = replace(base, seed=seed)
        m = run_synthetic("m-stgat", cfg, epochs=epochs, model=model).reports["test"].mape
        s = run_synthetic("stgat", cfg, epochs=epochs, model=model).reports["test"].mape
        rows.append(BenefitRow(seed, m, s))
        if progress is not None:
            progress(rows[-1])
    return rows


def median_reduction(rows: list[BenefitRow]) -> float:
    return float(np.median([r.relative_reduction for r in rows]))
