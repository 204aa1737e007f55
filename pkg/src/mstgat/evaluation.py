"""Error metrics, split/transfer evaluation and dataset summary tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import NormStats, WindowedDataset, WindowSpec, denormalize_speed, windows_for_transfer
from .ingest import ObservationTensor
from .models import ModelConfig, predict

MAPE_FLOOR = 1.0


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mape: float | None  # percent; None when every cell is under the floor
    n_cells: int
    n_mape_masked: int

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(predicted, actual, mape_floor: float = MAPE_FLOOR) -> MetricsReport:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"shape mismatch in metrics: {predicted.shape} vs {actual.shape}")
    err = (predicted - actual).reshape(-1)
    y = actual.reshape(-1)
    if err.size == 0:
        raise ValueError("no cells to evaluate")
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(y) >= mape_floor
    mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(y[keep]))) if keep.any() else None
    return MetricsReport(mae, rmse, mape, int(err.size), int((~keep).sum()))


def predict_dataset(config: ModelConfig, params, ds: WindowedDataset, mask, batch_size: int = 64) -> np.ndarray:
    parts = [predict(config, params, ds.inputs[lo:lo + batch_size], mask) for lo in range(0, len(ds), batch_size)]
    return np.concatenate(parts, axis=0)


def evaluate(config: ModelConfig, params, ds: WindowedDataset, mask, stats: NormStats,
             batch_size: int = 64) -> MetricsReport:
    """Metrics in mph over every (window, node, step) cell. Parameters are not touched."""
    pred = predict_dataset(config, params, ds, mask, batch_size)
    return compute_metrics(denormalize_speed(pred, stats), denormalize_speed(ds.targets, stats))


def transfer_evaluate(config: ModelConfig, params, transfer_sets: dict[str, ObservationTensor],
                      stats: NormStats, spec: WindowSpec, mask, batch_size: int = 64) -> dict[str, MetricsReport]:
    """Zero-shot evaluation on new periods using the training NormStats only."""
    reports = {}
    for name in sorted(transfer_sets):
        obs = transfer_sets[name]
        if obs.values.shape[1] != mask.shape[0]:
            raise ValueError(f"transfer set {name!r} has {obs.values.shape[1]} nodes, model graph has {mask.shape[0]}")
        ds = windows_for_transfer(obs, spec, stats, config.n_features)
        reports[name] = evaluate(config, params, ds, mask, stats, batch_size)
    return reports


# ---------------------------------------------------------------- dataset tables

@dataclass(frozen=True)
class SummaryStats:
    min: float
    q1: float
    q2: float
    q3: float
    max: float
    mean: float
    std: float


def summary_stats(series) -> SummaryStats:
    """Quantiles interpolate between order statistics at position p*(n-1); std uses n-1."""
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("summary of an empty series")
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return SummaryStats(*(float(v) for v in q), mean=float(x.mean()), std=std)


VISIBILITY_LEVELS = ("Low", "Medium", "High", "Clear")


@dataclass(frozen=True)
class OccurrenceStats:
    visibility: dict[str, float]  # percent per level
    lane_closure: float  # percent of cells with a closure


def occurrence_stats(visibility, closure) -> OccurrenceStats:
    """Visibility levels: Low < 4, Medium [4, 7), High [7, 10), Clear = 10 miles."""
    v = np.asarray(visibility, dtype=np.float64).reshape(-1)
    c = np.asarray(closure, dtype=np.float64).reshape(-1)
    if v.size != c.size:
        raise ValueError(f"visibility and closure series differ in length: {v.size} vs {c.size}")
    if v.size == 0:
        raise ValueError("occurrence of an empty series")
    counts = {
        "Low": np.count_nonzero(v < 4),
        "Medium": np.count_nonzero((v >= 4) & (v < 7)),
        "High": np.count_nonzero((v >= 7) & (v < 10)),
        "Clear": np.count_nonzero(v >= 10),
    }
    return OccurrenceStats({k: 100.0 * n / v.size for k, n in counts.items()},
                           100.0 * np.count_nonzero(c > 0) / c.size)


def dataset_tables(obs: ObservationTensor, set_name: str = "PD") -> dict:
    """Summary statistics per continuous channel and occurrence statistics for one tensor."""
    speed = obs.values[..., 0][~obs.missing]
    summary = {
        "speed": summary_stats(speed),
        "temperature": summary_stats(obs.values[..., 2]),
        "visibility": summary_stats(obs.values[..., 3]),
    }
    occ = occurrence_stats(obs.values[..., 3], obs.values[..., 1])
    return {"set": set_name, "summary": summary, "occurrence": occ}


def write_summary_csv(tables: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "set", "min", "q1", "q2", "q3", "max", "mean", "std"])
        for var in ("speed", "temperature", "visibility"):
            for t in tables:
                s = t["summary"][var]
                w.writerow([var, t["set"], s.min, s.q1, s.q2, s.q3, s.max, s.mean, s.std])


def write_occurrence_csv(tables: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "level", "set", "percent"])
        for level in VISIBILITY_LEVELS:
            for t in tables:
                w.writerow(["visibility", level, t["set"], t["occurrence"].visibility[level]])
        for t in tables:
            w.writerow(["lane_closure", "occurrence", t["set"], t["occurrence"].lane_closure])


def tables_to_json(tables: list[dict]) -> str:
    out = []
    for t in tables:
        out.append({"set": t["set"], "summary": {k: asdict(v) for k, v in t["summary"].items()},
                    "occurrence": asdict(t["occurrence"])})
    return json.dumps(out, indent=2)


def write_metrics_csv(rows, path) -> None:
    """Rows of ``(set, horizon, model, MetricsReport)`` in the error-table layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "metric", "horizon", "model", "value"])
        for set_name, horizon, model, rep in rows:
            for metric, value in (("MAE", rep.mae), ("RMSE", rep.rmse), ("MAPE", rep.mape)):
                w.writerow([set_name, metric, horizon, model, "" if value is None else value])
