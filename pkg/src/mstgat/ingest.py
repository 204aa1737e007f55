"""Load speed, lane-closure and weather files and align them on a 5-minute grid.

Channel order of the assembled tensor is fixed: speed (mph), closure code,
temperature (deg F), visibility (miles).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .graph import StationGraph, StationMeta, build_station_graph, parse_station_metadata

log = logging.getLogger(__name__)

CHANNELS = ("speed", "closure", "temperature", "visibility")
STEP = timedelta(minutes=5)
EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class TimeGrid:
    start: datetime
    count: int
    step: timedelta = STEP

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("a time grid needs at least one step")

    def times(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.count, freq=self.step)

    def time_at(self, k: int) -> datetime:
        return self.start + k * self.step

    def index_of(self, ts) -> int | None:
        """Grid index of an exactly aligned timestamp; ``None`` if outside the grid."""
        off = pd.Timestamp(ts) - pd.Timestamp(self.start)
        k, rem = divmod(off, pd.Timedelta(self.step))
        if rem != pd.Timedelta(0):
            raise ValueError(f"timestamp {pd.Timestamp(ts).isoformat()} is not on the {self.step} grid")
        return int(k) if 0 <= k < self.count else None

    def to_json(self) -> dict:
        return {"start": pd.Timestamp(self.start).isoformat(), "step_minutes": self.step.total_seconds() / 60,
                "count": self.count}

    @classmethod
    def from_json(cls, d: dict) -> "TimeGrid":
        return cls(start=pd.Timestamp(d["start"]).to_pydatetime(), count=int(d["count"]),
                   step=timedelta(minutes=d.get("step_minutes", 5)))


@dataclass(frozen=True)
class ClosureEvent:
    route_id: str
    direction: str
    begin_postmile: float
    end_postmile: float
    start_time: datetime
    end_time: datetime
    closed_lanes: int

    def __post_init__(self):
        if self.begin_postmile > self.end_postmile:
            raise ValueError(f"closure begin postmile {self.begin_postmile} > end {self.end_postmile}")
        if not self.start_time < self.end_time:
            raise ValueError(f"closure start {self.start_time} not before end {self.end_time}")
        if self.closed_lanes < 0:
            raise ValueError(f"negative closed lane count {self.closed_lanes}")


@dataclass
class SpeedSeries:
    values: np.ndarray  # [S, N], NaN where missing
    missing: np.ndarray  # [S, N] bool
    nodes: tuple[int, ...] = ()
    ignored_stations: tuple[int, ...] = ()

    @property
    def missing_fraction(self) -> dict[int, float]:
        return {s: float(self.missing[:, k].mean()) for k, s in enumerate(self.nodes)}


@dataclass
class WeatherSeries:
    weather_station_id: int
    temperature: np.ndarray  # [S], NaN where missing
    visibility: np.ndarray

    def __post_init__(self):
        v = self.visibility[~np.isnan(self.visibility)]
        if v.size and (v.min() < 0 or v.max() > 10):
            raise ValueError(f"weather station {self.weather_station_id}: visibility outside [0, 10]")


@dataclass(frozen=True)
class WeatherStation:
    weather_station_id: int
    latitude: float
    longitude: float


@dataclass
class ObservationTensor:
    grid: TimeGrid
    nodes: tuple[int, ...]
    values: np.ndarray  # [S, N, 4]
    missing: np.ndarray  # [S, N] bool, speed channel only

    def __post_init__(self):
        S, N = self.grid.count, len(self.nodes)
        if self.values.shape != (S, N, len(CHANNELS)):
            raise ValueError(f"observation values have shape {self.values.shape}, expected {(S, N, len(CHANNELS))}")
        if self.missing.shape != (S, N):
            raise ValueError(f"missing mask has shape {self.missing.shape}, expected {(S, N)}")
        code = self.values[..., 1]
        if not np.all((code == 0) | ((code >= 1) & (code <= 2))):
            raise ValueError("closure channel outside {0} U [1, 2]")

    @property
    def shape(self):
        return self.values.shape

    def slice_steps(self, start: int, stop: int) -> "ObservationTensor":
        grid = TimeGrid(self.grid.time_at(start), stop - start, self.grid.step)
        return ObservationTensor(grid, self.nodes, self.values[start:stop].copy(), self.missing[start:stop].copy())


# ---------------------------------------------------------------- speed

def load_speed_series(path, grid: TimeGrid, nodes) -> SpeedSeries:
    df = pd.read_csv(path, float_precision="round_trip")
    need = {"timestamp", "station_id", "speed_mph"}
    if not need <= set(df.columns):
        raise ValueError(f"{path}: speed CSV needs columns {sorted(need)}")
    nodes = tuple(nodes)
    pos = {s: k for k, s in enumerate(nodes)}
    values = np.full((grid.count, len(nodes)), np.nan)
    stamps = pd.to_datetime(df["timestamp"])
    off = stamps - pd.Timestamp(grid.start)
    step = pd.Timedelta(grid.step)
    bad = (off % step) != pd.Timedelta(0)
    if bad.any():
        ts = stamps[bad].iloc[0]
        raise ValueError(f"timestamp {ts.isoformat()} is not on the {grid.step} grid")
    k = (off // step).to_numpy(dtype=np.int64)
    sid = df["station_id"].to_numpy(dtype=np.int64)
    v = df["speed_mph"].to_numpy(dtype=np.float64)
    known = np.array([s in pos for s in sid], dtype=bool)
    ignored = set(sid[~known].tolist())
    keep = known & (k >= 0) & (k < grid.count) & ~np.isnan(v)
    cols = np.array([pos[s] for s in sid[keep]], dtype=np.int64)
    values[k[keep], cols] = v[keep]
    if ignored:
        log.warning("%s: %d stations not in graph were ignored: %s", path, len(ignored), sorted(ignored)[:10])
    return SpeedSeries(values, np.isnan(values), nodes, tuple(sorted(ignored)))


def _missing_runs(col_missing: np.ndarray):
    """Yield (start, stop) of runs of True."""
    k, n = 0, col_missing.size
    while k < n:
        if col_missing[k]:
            j = k
            while j < n and col_missing[j]:
                j += 1
            yield k, j
            k = j
        else:
            k += 1


def _interpolate_short_gaps(col: np.ndarray, max_gap: int) -> np.ndarray:
    out = col.copy()
    miss = np.isnan(col)
    for a, b in _missing_runs(miss):
        if a == 0 or b == col.size or b - a > max_gap:
            continue
        lo, hi = col[a - 1], col[b]
        span = b - a + 1
        for k in range(a, b):
            w = (k - a + 1) / span
            out[k] = lo + w * (hi - lo)
    return out


def fill_speed_gaps(series: SpeedSeries, max_gap: int = 6) -> SpeedSeries:
    """Linearly interpolate interior missing runs of at most ``max_gap`` steps."""
    raw = np.where(series.missing, np.nan, series.values)
    values = np.column_stack([_interpolate_short_gaps(raw[:, k], max_gap) for k in range(raw.shape[1])])
    return SpeedSeries(values, np.isnan(values), series.nodes, series.ignored_stations)


# ---------------------------------------------------------------- closures

CLOSURE_COLUMNS = ("route_id", "direction", "begin_postmile", "end_postmile", "start_time", "end_time", "closed_lanes")


def load_closure_events(path) -> list[ClosureEvent]:
    df = pd.read_csv(path, float_precision="round_trip", dtype={"route_id": str, "direction": str})
    if not set(CLOSURE_COLUMNS) <= set(df.columns):
        raise ValueError(f"{path}: closure CSV needs columns {list(CLOSURE_COLUMNS)}")
    events = []
    for r in df.itertuples(index=False):
        events.append(ClosureEvent(
            route_id=str(r.route_id), direction=str(r.direction).upper(),
            begin_postmile=float(r.begin_postmile), end_postmile=float(r.end_postmile),
            start_time=pd.Timestamp(r.start_time).to_pydatetime(),
            end_time=pd.Timestamp(r.end_time).to_pydatetime(),
            closed_lanes=int(r.closed_lanes)))
    return events


def write_closure_events(events, path) -> None:
    rows = [(e.route_id, e.direction, repr(e.begin_postmile), repr(e.end_postmile),
             pd.Timestamp(e.start_time).isoformat(), pd.Timestamp(e.end_time).isoformat(), e.closed_lanes)
            for e in events]
    pd.DataFrame(rows, columns=CLOSURE_COLUMNS).to_csv(path, index=False)


def match_closures_to_station(events, station: StationMeta):
    return [(e.start_time, e.end_time, e.closed_lanes) for e in events
            if e.route_id == station.route_id and e.direction == station.direction
            and e.begin_postmile <= station.abs_postmile <= e.end_postmile]


def encode_closure_channel(matched, n_lanes: int, grid: TimeGrid) -> np.ndarray:
    """0 where no closure overlaps a step, else 1 + c/n with the largest overlapping c.

    Step ``[t, t+step)`` overlaps event ``[s, e)`` iff ``t < e and s < t+step``.
    """
    if n_lanes < 1:
        raise ValueError(f"n_lanes must be >= 1, got {n_lanes}")
    worst = np.full(grid.count, -1)
    t0 = pd.Timestamp(grid.start)
    step = pd.Timedelta(grid.step)
    for start, end, c in matched:
        if c > n_lanes:
            raise ValueError(f"closure with {c} closed lanes at a location with {n_lanes} lanes")
        s, e = pd.Timestamp(start), pd.Timestamp(end)
        # first k with t_k + step > s, last k with t_k < e
        lo = max(0, math.floor((s - t0) / step))
        hi = min(grid.count - 1, math.ceil((e - t0) / step) - 1)
        for k in range(lo, hi + 1):
            t = t0 + k * step
            if t < e and s < t + step and c > worst[k]:
                worst[k] = c
    return np.where(worst >= 0, 1.0 + np.maximum(worst, 0) / n_lanes, 0.0)


# ---------------------------------------------------------------- weather

def haversine_km(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def _nearest(lat, lon, candidates):
    return min(candidates, key=lambda w: (haversine_km(lat, lon, w.latitude, w.longitude), w.weather_station_id))


def assign_nearest_weather_station(stations, weather_stations) -> dict[int, int]:
    weather_stations = list(weather_stations)
    if not weather_stations:
        raise ValueError("need at least one weather station")
    return {s.station_id: _nearest(s.latitude, s.longitude, weather_stations).weather_station_id for s in stations}


def load_weather_stations(path) -> list[WeatherStation]:
    df = pd.read_csv(path, float_precision="round_trip")
    return [WeatherStation(int(r.weather_station_id), float(r.latitude), float(r.longitude))
            for r in df.itertuples(index=False)]


def write_weather_stations(stations, path) -> None:
    pd.DataFrame([(w.weather_station_id, repr(w.latitude), repr(w.longitude)) for w in stations],
                 columns=["weather_station_id", "latitude", "longitude"]).to_csv(path, index=False)


def load_weather_records(path) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip")
    need = {"weather_station_id", "timestamp", "temperature_f", "visibility_mi"}
    if not need <= set(df.columns):
        raise ValueError(f"{path}: weather CSV needs columns {sorted(need)}")
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    df["weather_station_id"] = df["weather_station_id"].astype(int)
    return df


def _snap(times: pd.Series, vals: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Last non-missing record in ``(t_k - step, t_k]`` for every grid step."""
    out = np.full(grid.count, np.nan)
    t0 = pd.Timestamp(grid.start)
    step = pd.Timedelta(grid.step)
    order = np.argsort(times.values, kind="stable")
    for i in order:
        v = vals[i]
        if np.isnan(v):
            continue
        off = times.iloc[i] - t0
        k = math.ceil(off / step)
        if 0 <= k < grid.count:
            out[k] = v  # later records overwrite earlier ones within the step
    return out


def resample_and_fill_weather(records: pd.DataFrame, grid: TimeGrid, weather_stations,
                              max_gap: int = 6) -> dict[int, WeatherSeries]:
    """Snap irregular records to the grid, interpolate short gaps, borrow long ones.

    Gaps of at most ``max_gap`` steps are linearly interpolated. Remaining
    holes take the value of the nearest other weather station (haversine,
    ascending) that has data at that step after its own interpolation.
    """
    stations = {w.weather_station_id: w for w in weather_stations}
    for wid in records["weather_station_id"].unique():
        if int(wid) not in stations:
            raise ValueError(f"weather records reference unknown weather station {wid}")
    own: dict[int, dict[str, np.ndarray]] = {}
    for wid in sorted(stations):
        sub = records[records["weather_station_id"] == wid]
        chans = {}
        for col, key in (("temperature_f", "temperature"), ("visibility_mi", "visibility")):
            snapped = _snap(sub["timestamp"], sub[col].to_numpy(dtype=float), grid)
            chans[key] = _interpolate_short_gaps(snapped, max_gap)
        own[wid] = chans

    out = {}
    for wid in sorted(stations):
        w = stations[wid]
        others = sorted((o for o in stations.values() if o.weather_station_id != wid),
                        key=lambda o: (haversine_km(w.latitude, w.longitude, o.latitude, o.longitude),
                                       o.weather_station_id))
        filled = {}
        for key, arr in own[wid].items():
            arr = arr.copy()
            for k in np.flatnonzero(np.isnan(arr)):
                for o in others:
                    v = own[o.weather_station_id][key][k]
                    if not np.isnan(v):
                        arr[k] = v
                        break
                else:
                    raise ValueError(f"weather station {wid}: {key} at step {k} "
                                     f"({pd.Timestamp(grid.time_at(k)).isoformat()}) cannot be filled")
            filled[key] = arr
        out[wid] = WeatherSeries(wid, filled["temperature"], filled["visibility"])
    return out


def write_weather_records(series: dict[int, WeatherSeries], grid: TimeGrid, path) -> None:
    times = [pd.Timestamp(t).isoformat() for t in grid.times()]
    rows = []
    for wid in sorted(series):
        ws = series[wid]
        for k, t in enumerate(times):
            rows.append((wid, t, repr(float(ws.temperature[k])), repr(float(ws.visibility[k]))))
    pd.DataFrame(rows, columns=["weather_station_id", "timestamp", "temperature_f", "visibility_mi"]).to_csv(path, index=False)


# ---------------------------------------------------------------- assembly

def assemble_observation_tensor(speed: SpeedSeries, closures: np.ndarray, temperature: np.ndarray,
                                visibility: np.ndarray, graph: StationGraph, grid: TimeGrid) -> ObservationTensor:
    shape = (grid.count, len(graph.nodes))
    for name, arr in (("speed", speed.values), ("closure", closures),
                      ("temperature", temperature), ("visibility", visibility)):
        if arr.shape != shape:
            raise ValueError(f"{name} block has shape {arr.shape}, expected {shape}")
    values = np.stack([speed.values, closures, temperature, visibility], axis=-1).astype(np.float64)
    return ObservationTensor(grid, tuple(graph.nodes), values, speed.missing.copy())


def align(stations, graph: StationGraph, grid: TimeGrid, speed_path, closure_path, weather_path,
          weather_station_path, max_gap: int = 6) -> ObservationTensor:
    """File-to-tensor pipeline in fixed node order."""
    by_id = {s.station_id: s for s in stations}
    speed = fill_speed_gaps(load_speed_series(speed_path, grid, graph.nodes), max_gap)
    events = load_closure_events(closure_path) if closure_path else []
    closures = np.column_stack([
        encode_closure_channel(match_closures_to_station(events, by_id[s]), by_id[s].num_lanes, grid)
        for s in graph.nodes])
    wstations = load_weather_stations(weather_station_path)
    weather = resample_and_fill_weather(load_weather_records(weather_path), grid, wstations, max_gap)
    nearest = assign_nearest_weather_station([by_id[s] for s in graph.nodes], wstations)
    temperature = np.column_stack([weather[nearest[s]].temperature for s in graph.nodes])
    visibility = np.column_stack([weather[nearest[s]].visibility for s in graph.nodes])
    return assemble_observation_tensor(speed, closures, temperature, visibility, graph, grid)


def infer_grid(speed_path) -> TimeGrid:
    stamps = pd.to_datetime(pd.read_csv(speed_path, usecols=["timestamp"])["timestamp"])
    start, end = stamps.min(), stamps.max()
    count = int((end - start) / pd.Timedelta(STEP)) + 1
    return TimeGrid(start.to_pydatetime(), count)


def align_files(metadata_path, speed_path, closure_path, weather_path, weather_station_path,
                manual_edges=None, max_gap: int = 6, grid: TimeGrid | None = None):
    stations, _ = parse_station_metadata(metadata_path)
    graph = build_station_graph(stations, manual_edges)
    grid = grid or infer_grid(speed_path)
    obs = align(stations, graph, grid, speed_path, closure_path, weather_path, weather_station_path, max_gap)
    return obs, graph, stations


# ---------------------------------------------------------------- persistence

def save_observations(obs: ObservationTensor, path) -> Path:
    """Little-endian float64 ``[S, N, 4]`` block; missing speed cells stored as NaN."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    vals = obs.values.copy()
    vals[..., 0][obs.missing] = np.nan
    vals.astype("<f8").tofile(bin_path)
    meta = {"shape": list(vals.shape), "dtype": "<f8", "order": "C", "grid": obs.grid.to_json(),
            "nodes": list(obs.nodes), "channels": list(CHANNELS), "missing_speed": "nan",
            "data_file": bin_path.name}
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2))
    return json_path


def load_observations(path) -> ObservationTensor:
    json_path = Path(path).with_suffix(".json")
    meta = json.loads(json_path.read_text())
    shape = tuple(meta["shape"])
    if len(shape) != 3 or shape[2] != len(CHANNELS) or meta.get("channels") != list(CHANNELS):
        raise ValueError(f"{json_path}: not an observation tensor sidecar")
    raw = np.fromfile(json_path.with_name(meta["data_file"]), dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{json_path}: data file holds {raw.size} values, expected {int(np.prod(shape))}")
    vals = raw.reshape(shape).astype(np.float64)
    missing = np.isnan(vals[..., 0])
    if np.isnan(vals[..., 1:]).any():
        raise ValueError(f"{json_path}: non-speed channels contain NaN")
    return ObservationTensor(TimeGrid.from_json(meta["grid"]), tuple(meta["nodes"]), vals, missing)
