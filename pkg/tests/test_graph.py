import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from conftest import rec
from gemfence.errors import (DuplicateRecordId, EmptyReadings, IsolatedNode, RecordParseError,
                             RssOutOfRange, WeightNotPositive)
from gemfence.graph import (MAC, RECORD, BipartiteGraph, SignalRecord, WalkConfig, build_graph,
                            read_records, write_records)


def test_edge_weight_is_rss_plus_offset():
    g = BipartiteGraph(offset=120)
    u = g.add_record(rec("r", ("aa", -67)))
    assert g.weight(u, g.mac_index["aa"]) == 53


def test_duplicate_mac_keeps_strongest_reading():
    g = BipartiteGraph()
    u = g.add_record(rec("r", ("aa", -50), ("aa", -60)))
    assert g.degree(u) == 1
    assert g.weight(u, g.mac_index["aa"]) == 70


def test_record_validation_errors():
    g = BipartiteGraph()
    with pytest.raises(EmptyReadings):
        g.add_record(rec("e"))
    with pytest.raises(RssOutOfRange):
        g.add_record(rec("hot", ("a", 5.0)))
    g.add_record(rec("ok", ("a", -50)))
    with pytest.raises(DuplicateRecordId):
        g.add_record(rec("ok", ("b", -50)))
    tight = BipartiteGraph(offset=50)
    with pytest.raises(WeightNotPositive):
        tight.add_record(rec("w", ("a", -50)))


def test_failed_insert_leaves_graph_untouched():
    g = BipartiteGraph(offset=50)
    with pytest.raises(WeightNotPositive):
        g.add_record(rec("w", ("a", -40), ("b", -60)))
    assert g.num_nodes == 0


def test_structure_invariants(small_graph):
    g = small_graph
    for i in range(g.num_nodes):
        for j, w in g.adj[i].items():
            assert g.side[i] != g.side[j]
            assert g.adj[j][i] == w
            assert w > 0
    assert sorted(g.record_nodes() + g.mac_nodes()) == list(range(g.num_nodes))
    assert g.num_edges == 7


def test_indices_are_append_only(small_graph):
    before = list(small_graph.names)
    small_graph.detach_record(small_graph.record_index["r1"])
    small_graph.add_record(rec("r3", ("z", -40)))
    assert small_graph.names[:len(before)] == before
    assert small_graph.degree(small_graph.record_index["r1"]) == 0


def test_same_stream_same_graph():
    recs = [rec(f"r{i}", (f"m{i % 3}", -40.0 - i), (f"m{(i + 1) % 3}", -70.0)) for i in range(6)]
    assert build_graph(recs).to_dict() == build_graph(recs).to_dict()


def test_probabilities_sum_to_one(small_graph):
    for i in range(small_graph.num_nodes):
        _, p = small_graph.sampling_probabilities(i)
        assert abs(p.sum() - 1.0) < 1e-12


def test_single_neighbor_sampling():
    g = BipartiteGraph()
    u = g.add_record(rec("r", ("x", -60)))
    x = g.mac_index["x"]
    assert g.sample_neighbors(u, 5, np.random.default_rng(0)).tolist() == [x] * 5


def test_isolated_node_cannot_sample(small_graph):
    u = small_graph.record_index["r0"]
    small_graph.detach_record(u)
    with pytest.raises(IsolatedNode):
        small_graph.sample_neighbors(u, 3, np.random.default_rng(0))
    with pytest.raises(IsolatedNode):
        small_graph.random_walk(u, 3, np.random.default_rng(0))
    with pytest.raises(IsolatedNode):
        small_graph.sample_many(np.array([u]), 3, np.random.default_rng(0))


def test_weighted_sampling_law():
    # weights 1 and 3 -> probabilities 0.25 / 0.75
    g = BipartiteGraph(offset=120)
    u = g.add_record(rec("r", ("a", -119), ("b", -117)))
    a, b = g.mac_index["a"], g.mac_index["b"]
    draws = g.sample_neighbors(u, 100_000, np.random.default_rng(7))
    counts = [np.sum(draws == a), np.sum(draws == b)]
    assert abs(counts[1] / 1e5 - 0.75) < 0.01
    assert chisquare(counts, [25_000, 75_000]).pvalue > 0.01


def test_vectorised_sampler_matches_law(small_graph):
    g = small_graph
    nodes = np.arange(g.num_nodes)
    smp = g.sample_many(nodes, 20_000, np.random.default_rng(3))
    for i in nodes:
        nbrs, p = g.sampling_probabilities(i)
        counts = [np.sum(smp[i] == j) for j in nbrs]
        if len(nbrs) == 1:
            assert counts == [20_000]
            continue
        assert chisquare(counts, p * 20_000).pvalue > 0.001


def test_sample_many_weights_match_edges(small_graph):
    nodes = np.arange(small_graph.num_nodes)
    smp, w = small_graph.sample_many_weighted(nodes, 7, np.random.default_rng(1))
    assert np.array_equal(small_graph.weights_for(nodes, smp), w)
    with pytest.raises(KeyError):
        small_graph.weights_for(np.array([0]), np.array([[0]]))


def test_two_node_walk_alternates():
    g = BipartiteGraph()
    u = g.add_record(rec("r", ("v", -50)))
    v = g.mac_index["v"]
    assert g.random_walk(u, 5, np.random.default_rng(0)) == [u, v, u, v, u]
    assert g.random_walk(u, 1, np.random.default_rng(0)) == [u]


def test_star_walk_first_transition():
    # centre MAC with two record leaves of equal weight
    g = BipartiteGraph()
    g.add_record(rec("a", ("c", -60)))
    g.add_record(rec("b", ("c", -60)))
    c, a = g.mac_index["c"], g.record_index["a"]
    rng = np.random.default_rng(11)
    first = np.array([g.random_walk(c, 2, rng)[1] for _ in range(100_000)])
    frac = np.mean(first == a)
    assert abs(frac - 0.5) < 0.01
    assert chisquare([np.sum(first == a), np.sum(first != a)]).pvalue > 0.01


@given(st.integers(0, 2**31 - 1))
def test_walks_alternate_sides_and_follow_edges(seed):
    rng = np.random.default_rng(seed)
    from conftest import random_graph
    g = random_graph(rng, 5, 4)
    start = int(rng.integers(g.num_nodes))
    if g.degree(start) == 0:
        return
    walk = g.random_walk(start, 9, rng)
    for x, y in zip(walk, walk[1:]):
        assert y in g.adj[x]
        assert g.side[x] != g.side[y]


@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.floats(-119, 0)), min_size=1, max_size=8))
def test_dedup_invariants(readings):
    r = SignalRecord("x", 0, readings).deduplicated()
    macs = [m for m, _ in r.readings]
    assert len(macs) == len(set(macs))
    for m, v in r.readings:
        assert v == max(x for mm, x in readings if mm == m)


def test_jsonl_round_trip(tmp_path):
    recs = [rec("r1", ("a", -40.5), ("b", -70.0), label="in", ts=5), rec("r2", ("c", -90.0), ts=6)]
    path = tmp_path / "r.jsonl"
    write_records(path, recs)
    back = read_records(path)
    assert [(r.id, r.timestamp, r.readings, r.label) for r in back] == \
           [(r.id, r.timestamp, r.readings, r.label) for r in recs]


def test_jsonl_malformed_lines(tmp_path, caplog):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"id": "a", "ts": 1, "readings": [{"mac": "m", "rss_dbm": -50}], "extra": 1})
    path.write_text(good + "\n{not json\n" + json.dumps({"id": "b", "ts": "x", "readings": []}) + "\n")
    assert [r.id for r in read_records(path)] == ["a"]
    assert "line 2" in caplog.text
    with pytest.raises(RecordParseError) as exc:
        read_records(path, strict=True)
    assert exc.value.line_no == 2


def test_graph_dict_round_trip(small_graph):
    g2 = BipartiteGraph.from_dict(json.loads(json.dumps(small_graph.to_dict())))
    assert g2.adj == small_graph.adj
    assert g2.side == small_graph.side
    assert g2.side[g2.mac_index["a"]] == MAC
    assert g2.side[g2.record_index["r0"]] == RECORD


def test_walk_config_validation():
    with pytest.raises(ValueError):
        WalkConfig(walks_per_node=0)
    with pytest.raises(ValueError):
        WalkConfig(walk_length=1)
