"""Normalization, sliding windows and the contiguous train/val/test split."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ObservationTensor

STEP_MINUTES = 5
CONTINUOUS = {"speed": 0, "temperature": 2, "visibility": 3}
SPLIT_FRACTIONS = (0.72, 0.14)


@dataclass(frozen=True)
class WindowSpec:
    history: int
    horizon: int

    def __post_init__(self):
        if self.history < 1 or self.horizon < 1:
            raise ValueError(f"history and horizon must be >= 1, got {self.history}, {self.horizon}")

    @property
    def length(self) -> int:
        return self.history + self.horizon


def horizon_to_windowspec(horizon_minutes: int) -> WindowSpec:
    if horizon_minutes <= 0 or horizon_minutes % STEP_MINUTES:
        raise ValueError(f"prediction horizon must be a positive multiple of {STEP_MINUTES} minutes, got {horizon_minutes}")
    steps = horizon_minutes // STEP_MINUTES
    return WindowSpec(history=2 * steps, horizon=steps)


@dataclass(frozen=True)
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]

    def to_json(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls({k: float(v) for k, v in d["mean"].items()}, {k: float(v) for k, v in d["std"].items()})

    def vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (shift, scale) with identity for the closure channel."""
        mu, sd = np.zeros(4), np.ones(4)
        for name, ch in CONTINUOUS.items():
            mu[ch], sd[ch] = self.mean[name], self.std[name]
        return mu, sd


def compute_norm_stats(values: np.ndarray, missing: np.ndarray, train_range: tuple[int, int]) -> NormStats:
    """Sample mean/std (ddof=1) per continuous channel over steps in ``train_range``.

    Missing speed cells are skipped. A std below 1e-9 (or undefined) becomes 1.
    """
    lo, hi = train_range
    if hi <= lo:
        raise ValueError(f"empty training range {train_range}")
    block, miss = values[lo:hi], missing[lo:hi]
    mean, std = {}, {}
    for name, ch in CONTINUOUS.items():
        x = block[..., ch]
        x = x[~miss] if ch == 0 else x.reshape(-1)
        m = float(x.mean())
        s = float(x.std(ddof=1)) if x.size > 1 else 0.0
        mean[name] = m
        std[name] = s if s >= 1e-9 else 1.0
    return NormStats(mean, std)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score the continuous channels of a ``[..., 4]`` array; closure passes through."""
    mu, sd = stats.vectors()
    return (values - mu) / sd


def normalize_speed(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean["speed"]) / stats.std["speed"]


def denormalize_speed(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std["speed"] + stats.mean["speed"]


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # [M, N, H, F]
    targets: np.ndarray  # [M, N, T]
    starts: np.ndarray  # [M] first input step of each window
    spec: WindowSpec
    dropped: int = 0
    stats: NormStats | None = None  # set once normalized
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.starts.size)

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[-1])

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.starts[idx], self.spec,
                               0, self.stats, dict(self.extra))

    def select_features(self, n: int) -> "WindowedDataset":
        """Keep the first ``n`` channels (n=1 keeps speed only)."""
        return WindowedDataset(self.inputs[..., :n].copy(), self.targets, self.starts, self.spec,
                               self.dropped, self.stats, dict(self.extra))

    def step_range(self) -> tuple[int, int]:
        return int(self.starts.min()), int(self.starts.max()) + self.spec.length


def make_windows(values: np.ndarray, missing: np.ndarray, spec: WindowSpec) -> WindowedDataset:
    """Window ``m`` reads steps ``[m, m+H)`` and predicts speed on ``[m+H, m+H+T)``.

    Windows touching any missing speed cell are dropped.
    """
    S = values.shape[0]
    if S < spec.length:
        raise ValueError(f"series of {S} steps is shorter than one window ({spec.length})")
    n_all = S - spec.length + 1
    bad_step = missing.any(axis=1).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(bad_step)])
    starts = np.arange(n_all)
    ok = (csum[starts + spec.length] - csum[starts]) == 0
    starts = starts[ok]
    view = np.lib.stride_tricks.sliding_window_view(values, spec.length, axis=0)  # [n_all, N, F, L]
    win = view[starts]
    inputs = np.ascontiguousarray(np.transpose(win[..., :spec.history], (0, 1, 3, 2)))
    targets = np.ascontiguousarray(win[:, :, 0, spec.history:])
    return WindowedDataset(inputs, targets, starts, spec, dropped=int(n_all - starts.size))


def split_sizes(m: int) -> tuple[int, int, int]:
    n_train = int(np.floor(SPLIT_FRACTIONS[0] * m))
    n_val = int(np.floor(SPLIT_FRACTIONS[1] * m))
    return n_train, n_val, m - n_train - n_val


def split_dataset(windows: WindowedDataset):
    m = len(windows)
    if m < 3:
        raise ValueError(f"need at least 3 windows to split, got {m}")
    a, b, _ = split_sizes(m)
    order = np.argsort(windows.starts, kind="stable")
    return (windows.subset(order[:a]), windows.subset(order[a:a + b]), windows.subset(order[a + b:]))


def normalize_windows(ds: WindowedDataset, stats: NormStats) -> WindowedDataset:
    mu, sd = stats.vectors()
    f = ds.n_features
    inputs = (ds.inputs - mu[:f]) / sd[:f]
    return WindowedDataset(inputs, normalize_speed(ds.targets, stats), ds.starts, ds.spec, ds.dropped, stats,
                           dict(ds.extra))


@dataclass
class PreparedData:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    stats: NormStats
    spec: WindowSpec
    dropped: int


def prepare(obs: ObservationTensor, spec: WindowSpec, n_features: int = 4) -> PreparedData:
    """Window, split contiguously, fit NormStats on the training steps, normalize."""
    raw = make_windows(obs.values, obs.missing, spec)
    train, val, test = split_dataset(raw)
    stats = compute_norm_stats(obs.values, obs.missing, train.step_range())
    parts = [normalize_windows(p, stats).select_features(n_features) for p in (train, val, test)]
    return PreparedData(*parts, stats=stats, spec=spec, dropped=raw.dropped)


def windows_for_transfer(obs: ObservationTensor, spec: WindowSpec, stats: NormStats, n_features: int) -> WindowedDataset:
    if obs.values.shape[-1] < n_features:
        raise ValueError(f"transfer tensor has {obs.values.shape[-1]} channels, model needs {n_features}")
    return normalize_windows(make_windows(obs.values, obs.missing, spec), stats).select_features(n_features)


def save_windows(ds: WindowedDataset, path) -> Path:
    """Inputs, targets and starts as consecutive little-endian blocks plus a JSON sidecar."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    blocks = [("inputs", ds.inputs.astype("<f8")), ("targets", ds.targets.astype("<f8")),
              ("starts", ds.starts.astype("<i8"))]
    layout, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in blocks:
            buf = np.ascontiguousarray(arr).tobytes()
            fh.write(buf)
            layout.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
            offset += len(buf)
    meta = {"blocks": layout, "spec": asdict(ds.spec), "dropped": ds.dropped,
            "norm_stats": ds.stats.to_json() if ds.stats else None, "data_file": bin_path.name}
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2))
    return json_path


def load_windows(path) -> WindowedDataset:
    json_path = Path(path).with_suffix(".json")
    meta = json.loads(json_path.read_text())
    raw = json_path.with_name(meta["data_file"]).read_bytes()
    arrs = {}
    for b in meta["blocks"]:
        dt = np.dtype(b["dtype"])
        n = int(np.prod(b["shape"]))
        arrs[b["name"]] = np.frombuffer(raw, dtype=dt, count=n, offset=b["offset"]).reshape(b["shape"]).copy()
    stats = NormStats.from_json(meta["norm_stats"]) if meta.get("norm_stats") else None
    return WindowedDataset(arrs["inputs"].astype(np.float64), arrs["targets"].astype(np.float64),
                           arrs["starts"].astype(np.int64), WindowSpec(**meta["spec"]), meta["dropped"], stats)
