import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mstgat.graph import (StationGraph, StationMeta, attention_neighborhood, build_station_graph, export_graph,
                          load_graph, parse_station_metadata, read_manual_edges, write_station_metadata)

HEADER = "station_id,route_id,direction,abs_postmile,num_lanes,latitude,longitude\n"


def meta(sid, route="80", direction="E", pm=1.0, lanes=4):
    return StationMeta(sid, route, direction, pm, lanes, 38.5, -121.5)


def test_parse_valid_file(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(HEADER + "1,80,E,1.0,4,38.5,-121.5\n2,80,E,2.5,4,38.5,-121.4\n3,80,W,1.0,3,38.5,-121.5\n")
    stations, skipped = parse_station_metadata(p)
    assert [s.station_id for s in stations] == [1, 2, 3]
    assert skipped == 0
    assert stations[2].num_lanes == 3


def test_parse_skips_row_with_missing_lanes(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(HEADER + "1,80,E,1.0,,38.5,-121.5\n2,80,E,2.5,4,38.5,-121.4\n")
    stations, skipped = parse_station_metadata(p)
    assert skipped == 1 and [s.station_id for s in stations] == [2]


def test_parse_rejects_duplicate_id(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(HEADER + "42,80,E,1.0,4,38.5,-121.5\n42,80,E,2.5,4,38.5,-121.4\n")
    with pytest.raises(ValueError, match="42"):
        parse_station_metadata(p)


def test_parse_rejects_bad_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id,route\n1,80\n")
    with pytest.raises(ValueError, match="header"):
        parse_station_metadata(p)


def test_metadata_round_trip(tmp_path):
    stations = [meta(5, pm=0.3), meta(9, direction="S", pm=7.25, lanes=2)]
    write_station_metadata(stations, tmp_path / "s.csv")
    assert parse_station_metadata(tmp_path / "s.csv") == (stations, 0)


def test_chain_example():
    g = build_station_graph([meta(1, pm=1.0), meta(2, pm=2.5), meta(3, pm=4.0)])
    assert set(g.edges) == {(1, 2), (2, 3)}


def test_southbound_edges_run_toward_lower_postmile():
    g = build_station_graph([meta(1, direction="S", pm=1.0), meta(2, direction="S", pm=2.5)])
    assert g.edges == ((2, 1),)


def test_different_routes_are_not_connected():
    assert build_station_graph([meta(1, route="80"), meta(2, route="50", pm=2.0)]).edges == ()


def test_max_gap_prunes_long_links():
    g = build_station_graph([meta(1, pm=0.0), meta(2, pm=0.5), meta(3, pm=3.0)], max_gap_miles=1.0)
    assert g.edges == ((1, 2),)


def test_manual_edges_append_and_validate():
    stations = [meta(1, route="80"), meta(2, route="50")]
    assert build_station_graph(stations, manual_edges=[(1, 2)]).edges == ((1, 2),)
    with pytest.raises(ValueError, match="99"):
        build_station_graph(stations, manual_edges=[(1, 99)])


def test_read_manual_edges(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("# interchange\n1,2\n\n3,4\n")
    assert read_manual_edges(p) == [(1, 2), (3, 4)]


def test_neighborhood_examples():
    chain = StationGraph((1, 2, 3), ((1, 2), (2, 3)))
    assert attention_neighborhood(chain, 2) == {1, 2, 3}
    assert attention_neighborhood(chain, 1) == {1, 2}
    assert attention_neighborhood(StationGraph((7,), ()), 7) == {7}
    with pytest.raises(KeyError):
        attention_neighborhood(chain, 4)


def test_attention_mask_matches_neighborhoods():
    g = StationGraph((1, 2, 3, 4), ((1, 2), (2, 3)))
    mask = g.attention_mask()
    for i, s in enumerate(g.nodes):
        assert {g.nodes[j] for j in np.flatnonzero(mask[i])} == g.neighborhood(s)


def test_export_round_trip(tmp_path):
    g = build_station_graph([meta(10, pm=1.0), meta(20, pm=2.0), meta(30, direction="W", pm=5.0)])
    export_graph(g, tmp_path / "g.txt", tmp_path / "g.json")
    assert (tmp_path / "g.txt").read_text() == "0 1\n"
    assert load_graph(tmp_path / "g.txt", tmp_path / "g.json") == g


@st.composite
def station_sets(draw):
    n = draw(st.integers(1, 50))
    routes = draw(st.lists(st.sampled_from(["5", "80", "50"]), min_size=n, max_size=n))
    dirs = draw(st.lists(st.sampled_from(["N", "S", "E", "W"]), min_size=n, max_size=n))
    pms = draw(st.lists(st.integers(0, 400), min_size=n, max_size=n, unique=True))
    return [meta(100 + k, routes[k], dirs[k], pms[k] / 8.0) for k in range(n)]


def brute_force_edges(stations):
    """All-pairs check: a and b are joined iff they share route and direction and no
    third station of that group sits strictly between them."""
    edges = set()
    for a in stations:
        for b in stations:
            if a is b or (a.route_id, a.direction) != (b.route_id, b.direction):
                continue
            lo, hi = sorted((a.abs_postmile, b.abs_postmile))
            between = any(c.route_id == a.route_id and c.direction == a.direction and lo < c.abs_postmile < hi
                          for c in stations)
            if between:
                continue
            increasing = b.abs_postmile > a.abs_postmile
            if increasing == (a.direction in ("N", "E")):
                edges.add((a.station_id, b.station_id))
    return edges


@given(station_sets())
def test_graph_matches_all_pairs_oracle(stations):
    g = build_station_graph(stations)
    assert set(g.edges) == brute_force_edges(stations)
    assert len(set(g.edges)) == len(g.edges)
    assert all(a != b for a, b in g.edges)


@given(station_sets(), st.randoms())
def test_graph_is_order_invariant(stations, random):
    shuffled = list(stations)
    random.shuffle(shuffled)
    assert build_station_graph(shuffled) == build_station_graph(stations)


@given(station_sets())
def test_group_edge_count_and_nonempty_neighborhoods(stations):
    g = build_station_graph(stations)
    groups = {}
    for s in stations:
        groups.setdefault((s.route_id, s.direction), []).append(s)
    assert len(g.edges) == sum(len(m) - 1 for m in groups.values())
    assert g.attention_mask().any(axis=1).all()
