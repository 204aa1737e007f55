"""Slow, loop-based reference implementations used as test oracles.

Each oracle is written from the defining rule with plain Python arithmetic,
independently of the vectorized code it checks.
"""
import math
from datetime import timedelta


def closure_oracle(events, stations, grid_start, n_steps, step=timedelta(minutes=5)):
    """code[k][i] for every step k and station i by scanning every event."""
    out = [[0.0] * len(stations) for _ in range(n_steps)]
    for i, st in enumerate(stations):
        for k in range(n_steps):
            t = grid_start + k * step
            worst = None
            for e in events:
                same_road = e.route_id == st.route_id and e.direction == st.direction
                covers = e.begin_postmile <= st.abs_postmile <= e.end_postmile
                overlaps = t < e.end_time and e.start_time < t + step
                if same_road and covers and overlaps and (worst is None or e.closed_lanes > worst):
                    worst = e.closed_lanes
            if worst is not None:
                out[k][i] = 1.0 + worst / st.num_lanes
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_cell_oracle(x, h, c, w_x, w_h, b):
    """One LSTM step for a single sample; gate blocks ordered input, forget, output, candidate."""
    d = len(h)
    z = []
    for col in range(4 * d):
        s = b[col]
        for r in range(len(x)):
            s += x[r] * w_x[r][col]
        for r in range(d):
            s += h[r] * w_h[r][col]
        z.append(s)
    i = [_sigmoid(v) for v in z[0:d]]
    f = [_sigmoid(v) for v in z[d:2 * d]]
    o = [_sigmoid(v) for v in z[2 * d:3 * d]]
    g = [math.tanh(v) for v in z[3 * d:4 * d]]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
    h_new = [o[k] * math.tanh(c_new[k]) for k in range(d)]
    return h_new, c_new


def gat_oracle(features, neighborhoods, w, a, heads, slope=0.2):
    """Per-node attention for one snapshot. ``features`` is a list of N vectors."""
    n = len(features)
    d_out = len(w[0])
    d = d_out // heads
    proj = [[sum(features[v][r] * w[r][col] for r in range(len(w))) for col in range(d_out)] for v in range(n)]
    out = [[0.0] * d_out for _ in range(n)]
    for k in range(heads):
        sl = slice(k * d, (k + 1) * d)
        for i in range(n):
            nbrs = sorted(neighborhoods[i])
            scores = []
            for j in nbrs:
                e = sum(a[k][m] * proj[i][sl][m] for m in range(d)) + sum(a[k][d + m] * proj[j][sl][m] for m in range(d))
                scores.append(e if e > 0 else slope * e)
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j, wt in zip(nbrs, weights):
                for m in range(d):
                    out[i][k * d + m] += wt / total * proj[j][sl][m]
    return out


def metrics_oracle(pred, true, floor=1.0):
    abs_sum = sq_sum = pct_sum = 0.0
    n = kept = 0
    for p, y in zip(pred, true):
        e = p - y
        abs_sum += abs(e)
        sq_sum += e * e
        n += 1
        if abs(y) >= floor:
            pct_sum += abs(e) / abs(y)
            kept += 1
    return abs_sum / n, math.sqrt(sq_sum / n), (100.0 * pct_sum / kept if kept else None)


def kept_window_starts(missing_steps, n_steps, history, horizon):
    """Window starts whose [start, start + history + horizon) range avoids every missing step."""
    length = history + horizon
    return [s for s in range(n_steps - length + 1) if not any(s <= m < s + length for m in missing_steps)]


def random_closure_instance(rng, max_stations=20, max_events=50, max_steps=200):
    """Stations and events on two roads, with times that often fall off the 5-minute grid."""
    from datetime import datetime

    from mstgat.graph import StationMeta
    from mstgat.ingest import ClosureEvent

    roads = [("80", "E"), ("80", "W"), ("50", "E")]
    n_st = int(rng.integers(1, max_stations + 1))
    stations = []
    for k in range(n_st):
        route, direction = roads[int(rng.integers(len(roads)))]
        stations.append(StationMeta(k + 1, route, direction, round(float(rng.uniform(0, 10)), 2),
                                    int(rng.integers(1, 6)), 38.5, -121.5))
    start = datetime(2022, 3, 1)
    n_steps = int(rng.integers(1, max_steps + 1))
    events = []
    for _ in range(int(rng.integers(0, max_events + 1))):
        route, direction = roads[int(rng.integers(len(roads)))]
        lo = round(float(rng.uniform(0, 10)), 2)
        hi = round(lo + float(rng.uniform(0, 3)), 2)
        # minute resolution, so starts and ends land both on and off step boundaries
        s = int(rng.integers(-30, n_steps * 5 + 30))
        e = s + int(rng.integers(1, 120))
        lanes = int(rng.integers(0, 6))
        events.append(ClosureEvent(route, direction, lo, hi, start + timedelta(minutes=s),
                                   start + timedelta(minutes=e), lanes))
    # a closure never closes more lanes than a station has
    events = [e for e in events if all(e.closed_lanes <= s.num_lanes for s in stations
                                       if (s.route_id, s.direction) == (e.route_id, e.direction)
                                       and e.begin_postmile <= s.abs_postmile <= e.end_postmile)]
    return stations, events, start, n_steps
