import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from conftest import random_graph, rec
from gemfence.bisage import BisageParams, EmbeddingTable, bi_level_forward, init_embeddings
from gemfence.errors import EmptyGraph, MissingForwardTrace, NoEdges, ShapeMismatch
from gemfence.graph import BipartiteGraph, WalkConfig
from gemfence.trainer import (Adam, NegativeSampler, TrainConfig, batch_loss_and_output_grads,
                              generate_pairs, gradients, loss, sample_negatives, train)


def oracle_loss(pairs, negs, H, L):
    """Straight-line mean loss, one scalar term at a time."""
    sig = lambda t: 1.0 / (1.0 + np.exp(-t))
    total = 0.0
    for (x, y), zs in zip(pairs, negs):
        total -= np.log(sig(H[x] @ L[y]) * sig(L[x] @ H[y]))
        for z in zs:
            total -= np.log(sig(-(H[x] @ L[z])) * sig(-(L[x] @ H[z])))
    return total / len(pairs)


def test_loss_at_zero_inner_products():
    t = EmbeddingTable(np.zeros((3, 4)), np.zeros((3, 4)))
    assert abs(loss((0, 1), [2, 2, 2, 2], t) - 5 * 2 * np.log(2)) < 1e-12
    assert abs(loss((0, 1), [2, 2, 2, 2], t) - 6.93147) < 1e-5


def test_loss_saturation_goes_to_zero():
    big = 1e3
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]) * big
    L = np.array([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]]) * big
    J = loss((0, 1), [2], EmbeddingTable(H, L))
    assert 0.0 <= J < 1e-12


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss((0, 1), [0], EmbeddingTable(np.zeros((2, 3)), np.zeros((2, 4))))


@given(st.integers(0, 2**31 - 1))
def test_batch_loss_matches_oracle_and_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    H, L = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    pairs = rng.integers(0, 6, (5, 2))
    negs = rng.integers(0, 6, (5, 4))
    J, _, _ = batch_loss_and_output_grads(pairs, negs, H, L)
    assert abs(J - oracle_loss(pairs, negs, H, L)) < 1e-12 * max(1.0, J)
    assert J >= 0
    single = loss(tuple(pairs[0]), negs[0], EmbeddingTable(H, L))
    assert abs(single - oracle_loss(pairs[:1], negs[:1], H, L)) < 1e-12


def test_negative_sampler_law():
    s = NegativeSampler([1, 16])
    assert np.allclose(s.probs, [1 / 9, 8 / 9])
    draws = sample_negatives(s, 100_000, np.random.default_rng(0))
    counts = np.bincount(draws, minlength=2)
    assert abs(counts[1] / 1e5 - 8 / 9) < 0.01
    assert chisquare(counts, s.probs * 1e5).pvalue > 0.01


def test_negative_sampler_edge_cases():
    assert np.allclose(NegativeSampler([3, 3, 3]).probs, 1 / 3)
    assert set(NegativeSampler([0, 5]).sample(100, np.random.default_rng(0)).tolist()) == {1}
    with pytest.raises(EmptyGraph):
        NegativeSampler([0, 0])


def test_pairs_on_two_node_graph():
    g = BipartiteGraph()
    g.add_record(rec("u", ("v", -50)))
    pairs = generate_pairs(g, WalkConfig(1, 3), 0)
    # one walk from each side: u,v,u and v,u,v
    assert pairs.tolist() == [[0, 1], [1, 0], [1, 0], [0, 1]]
    assert len(generate_pairs(g, WalkConfig(1, 2), 0)) == 2


def test_pair_count_and_adjacency(small_graph):
    cfg = WalkConfig(3, 6)
    pairs = generate_pairs(small_graph, cfg, 1)
    assert len(pairs) == small_graph.num_nodes * 3 * 5
    for x, y in pairs.tolist():
        assert y in small_graph.adj[x]
        assert small_graph.side[x] != small_graph.side[y]
    with pytest.raises(NoEdges):
        generate_pairs(BipartiteGraph(), cfg, 0)


def test_walk_transition_law():
    # record with MAC weights 1 and 3: first step law {0.25, 0.75}
    g = BipartiteGraph(offset=120)
    g.add_record(rec("r", ("a", -119), ("b", -117)))
    pairs = generate_pairs(g, WalkConfig(100_000, 2), 4)
    first = pairs[pairs[:, 0] == 0][:, 1]
    counts = [np.sum(first == g.mac_index["a"]), np.sum(first == g.mac_index["b"])]
    assert chisquare(counts, [25_000, 75_000]).pvalue > 0.01


def _fd_check(seed, K, d=4):
    """Max relative error of analytic vs central-difference gradients."""
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 6)), int(rng.integers(2, 5)))
    p = BisageParams.initialize(d=d, K=K, n_samples=3, rng=rng)
    t0 = init_embeddings(g, d, rng)
    _, trace = bi_level_forward(g, p, t0, rng)
    pairs = generate_pairs(g, WalkConfig(1, 3), rng)[:6]
    negs = rng.integers(0, g.num_nodes, (len(pairs), 4))
    _, gh, gl = gradients(pairs, negs, trace, p)
    replay = trace.samples()

    def J(q):
        table, _ = bi_level_forward(g, q, t0, replay=replay)
        return batch_loss_and_output_grads(pairs, negs, table.H, table.L)[0]

    worst = 0.0
    step = 1e-5
    for fam, grads in (("W_h", gh), ("W_l", gl)):
        for k in range(K):
            for idx in np.ndindex(d, 2 * d):
                qp, qm = p.copy(), p.copy()
                getattr(qp, fam)[k][idx] += step
                getattr(qm, fam)[k][idx] -= step
                num = (J(qp) - J(qm)) / (2 * step)
                ana = grads[k][idx]
                worst = max(worst, abs(num - ana) / max(1e-6, abs(num) + abs(ana)))
    return worst


@pytest.mark.parametrize("K", [1, 2])
def test_gradients_match_finite_differences(K):
    assert max(_fd_check(s, K) for s in range(3)) < 1e-4


def test_zero_learning_signal_zero_gradient():
    g = BipartiteGraph()
    g.add_record(rec("u", ("v", -50)))
    p = BisageParams.initialize(d=2, K=1, n_samples=2, rng=0)
    t0 = init_embeddings(g, 2, 0)
    _, trace = bi_level_forward(g, p, t0, 0)
    # hand-set the final tables so every product saturates
    big = 1e4
    trace.H[-1][:] = [[big, 0.0], [0.0, big]]
    trace.L[-1][:] = [[0.0, big], [big, 0.0]]
    J, gH, gL = batch_loss_and_output_grads(np.array([[0, 1]]), np.empty((1, 0), int),
                                            trace.H[-1], trace.L[-1])
    assert J < 1e-12
    assert np.linalg.norm(gH) < 1e-8 and np.linalg.norm(gL) < 1e-8


def test_gradients_deterministic_and_need_trace(small_graph):
    p = BisageParams.initialize(d=4, K=2, n_samples=3, rng=0)
    _, trace = bi_level_forward(small_graph, p, init_embeddings(small_graph, 4, 0), 0)
    pairs = generate_pairs(small_graph, WalkConfig(1, 3), 0)[:4]
    negs = np.zeros((4, 4), dtype=int)
    a = gradients(pairs, negs, trace, p)
    b = gradients(pairs, negs, trace, p)
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1] + a[2], b[1] + b[2]))
    with pytest.raises(MissingForwardTrace):
        gradients(pairs, negs, None, p)


def _toy_graph():
    g = BipartiteGraph()
    rng = np.random.default_rng(0)
    for i in range(20):
        macs = rng.choice(8, size=3, replace=False)
        g.add_record(rec(f"r{i}", *[(f"m{(j + i // 10 * 4) % 8}", float(rng.uniform(-80, -40)))
                                     for j in macs]))
    return g


def test_training_reduces_loss():
    g = _toy_graph()
    p = BisageParams.initialize(d=8, K=2, n_samples=5, rng=1)
    res = train(g, TrainConfig(epochs=10, seed=3), p)
    assert res.losses[-1] < res.losses[0]
    assert len(res.losses) == 10


def test_training_deterministic_and_zero_lr():
    g = _toy_graph()
    p = BisageParams.initialize(d=8, K=2, n_samples=5, rng=1)
    a = train(g, TrainConfig(epochs=2, seed=5), p)
    b = train(g, TrainConfig(epochs=2, seed=5), p)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.matrices(), b.params.matrices()))
    frozen = train(g, TrainConfig(epochs=3, learning_rate=0.0, seed=5), p)
    assert all(np.array_equal(x, y) for x, y in zip(frozen.params.matrices(), p.matrices()))
    with pytest.raises(NoEdges):
        train(BipartiteGraph(), TrainConfig(), p)


def test_sgd_option_trains():
    g = _toy_graph()
    p = BisageParams.initialize(d=8, K=1, n_samples=5, rng=1)
    res = train(g, TrainConfig(epochs=3, optimizer="sgd", learning_rate=0.05, seed=0), p)
    assert not np.array_equal(res.params.W_h[0], p.W_h[0])
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_adam_first_step_is_lr_times_sign():
    W = np.zeros(3)
    Adam(0.1).step([W], [np.array([2.0, -0.5, 0.0])])
    assert np.allclose(W, [-0.1, 0.1, 0.0], atol=1e-6)


def test_loss_file(tmp_path):
    g = _toy_graph()
    res = train(g, TrainConfig(epochs=2, seed=0), BisageParams.initialize(d=4, K=1, rng=0))
    path = tmp_path / "loss.jsonl"
    res.write_losses(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"epoch": 1' in lines[0]
