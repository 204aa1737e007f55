"""Deterministic synthetic corridor whose speeds respond to closures and visibility.

speed(t, i) = base_i * diurnal(t) * (1 - closure_drop * closed_fraction(t - onset, i))
              * (1 - vis_sensitivity * (10 - visibility(t - onset, i)) / 10) + noise

Temperature follows a daily cycle, so it carries time-of-day information but
has no direct effect on speed. The ``onset`` lag stands for the delay between a
closure being logged (or fog reaching the weather station) and the slowdown at
the detector. When it spans the forecast horizon, the exogenous channels tell a
model about drops that the speed history cannot anticipate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .graph import StationGraph, StationMeta, build_station_graph, write_station_metadata
from .ingest import (ClosureEvent, ObservationTensor, TimeGrid, WeatherSeries, WeatherStation,
                     assign_nearest_weather_station, write_closure_events, write_weather_records,
                     write_weather_stations)

STEPS_PER_DAY = 288
MILE_DEG_LON = 1.0 / 87.12  # one mile of longitude near 38.5 N
ROUTE, DIRECTION = "80", "E"


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int = 8
    steps: int = 1500
    seed: int = 0
    start: str = "2022-01-03T00:00:00"
    base_speed: float = 65.0
    base_spread: float = 0.05
    diurnal_amplitude: float = 0.3
    noise_std: float = 0.5
    n_lanes: int = 4
    closure_rate: float = 0.01
    closure_mean_steps: float = 6.0
    shoulder_fraction: float = 0.1
    min_closed_lanes: int = 2
    closure_drop: float = 0.4
    visibility_event_rate: float = 0.004
    visibility_mean_steps: float = 24.0
    visibility_ramp_steps: int = 6
    visibility_min_range: tuple[float, float] = (0.5, 3.0)
    vis_sensitivity: float = 0.4
    temperature_mean: float = 58.0
    temperature_amplitude: float = 12.0
    temperature_noise_std: float = 0.2
    onset_steps: int = 6
    n_weather_stations: int = 2

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("a corridor needs at least 2 nodes")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("closure_drop", "vis_sensitivity"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0 <= self.min_closed_lanes <= self.n_lanes:
            raise ValueError("min_closed_lanes must lie in [0, n_lanes]")
        if self.n_weather_stations < 1:
            raise ValueError("need at least one weather station")

    def to_json(self) -> dict:
        d = asdict(self)
        d["visibility_min_range"] = list(self.visibility_min_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys {sorted(unknown)}")
        d = dict(d)
        if "visibility_min_range" in d:
            d["visibility_min_range"] = tuple(d["visibility_min_range"])
        return cls(**d)


@dataclass
class SynthOutputs:
    config: SynthConfig
    grid: TimeGrid
    stations: list[StationMeta]
    weather_stations: list[WeatherStation]
    events: list[ClosureEvent]
    weather: dict[int, WeatherSeries]
    nearest: dict[int, int]
    speed: np.ndarray  # [S, N] ground truth
    closure_code: np.ndarray  # [S, N] 0 or 1 + c/n
    clean_speed: np.ndarray  # [S, N] before noise

    @property
    def graph(self) -> StationGraph:
        return build_station_graph(self.stations)

    def observation_tensor(self) -> ObservationTensor:
        nodes = tuple(s.station_id for s in self.stations)
        temp = np.column_stack([self.weather[self.nearest[s]].temperature for s in nodes])
        vis = np.column_stack([self.weather[self.nearest[s]].visibility for s in nodes])
        values = np.stack([self.speed, self.closure_code, temp, vis], axis=-1)
        return ObservationTensor(self.grid, nodes, values, np.zeros(self.speed.shape, dtype=bool))


def diurnal_profile(steps: int, amplitude: float, offset: int = 0) -> np.ndarray:
    """Free-flow multiplier with morning and evening dips."""
    hours = ((np.arange(steps) + offset) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY

    def bump(center, width):
        d = np.minimum(np.abs(hours - center), 24.0 - np.abs(hours - center))
        return np.exp(-0.5 * (d / width) ** 2)

    return 1.0 - amplitude * np.maximum(bump(8.0, 1.0), bump(17.5, 1.25))


def _geometric(rng, mean: float) -> int:
    return int(rng.geometric(1.0 / mean))


def _visibility_track(rng, cfg: SynthConfig) -> np.ndarray:
    vis = np.full(cfg.steps, 10.0)
    t = 0
    ramp = max(1, cfg.visibility_ramp_steps)
    while t < cfg.steps:
        if rng.random() < cfg.visibility_event_rate:
            hold = _geometric(rng, cfg.visibility_mean_steps)
            floor = rng.uniform(*cfg.visibility_min_range)
            shape = np.concatenate([np.arange(1, ramp + 1) / ramp, np.ones(hold), np.arange(ramp - 1, -1, -1) / ramp])
            seg = 10.0 - (10.0 - floor) * shape
            end = min(cfg.steps, t + seg.size)
            vis[t:end] = np.minimum(vis[t:end], seg[:end - t])
            t = end
        else:
            t += 1
    return vis


def generate_corridor(cfg: SynthConfig) -> SynthOutputs:
    rng = np.random.default_rng(cfg.seed)
    S, N = cfg.steps, cfg.n_nodes
    start = pd.Timestamp(cfg.start).to_pydatetime()
    grid = TimeGrid(start, S)
    step = grid.step
    lat0, lon0 = 38.5, -121.5

    stations = [StationMeta(station_id=1000 + i, route_id=ROUTE, direction=DIRECTION,
                            abs_postmile=1.0 + i, num_lanes=cfg.n_lanes,
                            latitude=lat0, longitude=lon0 + i * MILE_DEG_LON) for i in range(N)]
    W = cfg.n_weather_stations
    span = N - 1
    wpos = [(-0.3 + k * (span + 0.6) / (W - 1)) if W > 1 else span / 2 for k in range(W)]
    weather_stations = [WeatherStation(1 + k, lat0 + 0.02, lon0 + p * MILE_DEG_LON) for k, p in enumerate(wpos)]
    nearest = assign_nearest_weather_station(stations, weather_stations)

    # weather
    hours = (np.arange(S) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    weather = {}
    for ws in weather_stations:
        temp = cfg.temperature_mean + cfg.temperature_amplitude * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
        if cfg.temperature_noise_std > 0:
            temp = temp + rng.normal(0.0, cfg.temperature_noise_std, S)
        weather[ws.weather_station_id] = WeatherSeries(ws.weather_station_id, temp, _visibility_track(rng, cfg))

    # closures, one at a time per station
    events: list[ClosureEvent] = []
    closed = np.zeros((S, N))
    code = np.zeros((S, N))
    for i, st in enumerate(stations):
        t = 0
        while t < S:
            if rng.random() < cfg.closure_rate:
                dur = _geometric(rng, cfg.closure_mean_steps)
                if rng.random() < cfg.shoulder_fraction:
                    c = 0
                else:
                    c = int(rng.integers(max(cfg.min_closed_lanes, 1), cfg.n_lanes + 1))
                end = min(S, t + dur)
                events.append(ClosureEvent(ROUTE, DIRECTION, st.abs_postmile - 0.1, st.abs_postmile + 0.1,
                                           start + t * step, start + end * step, c))
                closed[t:end, i] = c / cfg.n_lanes
                code[t:end, i] = 1.0 + c / cfg.n_lanes
                t = end
            else:
                t += 1

    vis = np.column_stack([weather[nearest[s.station_id]].visibility for s in stations])
    L = cfg.onset_steps
    closed_lag = np.zeros_like(closed)
    vis_lag = np.full_like(vis, 10.0)
    if L < S:
        closed_lag[L:] = closed[:S - L]
        vis_lag[L:] = vis[:S - L]
    base = cfg.base_speed * (1.0 + cfg.base_spread * rng.uniform(-1.0, 1.0, N))
    clean = (base[None, :] * diurnal_profile(S, cfg.diurnal_amplitude)[:, None]
             * (1.0 - cfg.closure_drop * closed_lag)
             * (1.0 - cfg.vis_sensitivity * (10.0 - vis_lag) / 10.0))
    speed = clean + rng.normal(0.0, cfg.noise_std, (S, N)) if cfg.noise_std > 0 else clean.copy()
    return SynthOutputs(cfg, grid, stations, weather_stations, events, weather, nearest, speed, code, clean)


FILES = {
    "metadata": "stations.csv",
    "speed": "speed.csv",
    "closures": "closures.csv",
    "weather": "weather.csv",
    "weather_stations": "weather_stations.csv",
    "config": "synth_config.json",
}


def export_synth(out: SynthOutputs, directory) -> dict[str, Path]:
    """Write the CSV inputs the ingest pipeline reads; returns the file paths."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write synthetic data to {directory}: {exc}") from exc
    paths = {k: directory / v for k, v in FILES.items()}
    write_station_metadata(out.stations, paths["metadata"])
    times = [pd.Timestamp(t).isoformat() for t in out.grid.times()]
    ids = [s.station_id for s in out.stations]
    S, N = out.speed.shape
    rows = {"timestamp": np.repeat(times, N), "station_id": np.tile(ids, S),
            "speed_mph": [repr(float(v)) for v in out.speed.reshape(-1)]}
    pd.DataFrame(rows).to_csv(paths["speed"], index=False)
    write_closure_events(out.events, paths["closures"])
    write_weather_records(out.weather, out.grid, paths["weather"])
    write_weather_stations(out.weather_stations, paths["weather_stations"])
    paths["config"].write_text(json.dumps(out.config.to_json(), indent=2))
    return paths
