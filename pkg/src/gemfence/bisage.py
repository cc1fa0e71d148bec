"""Bi-level sample-and-aggregate embeddings on the record/MAC bipartite graph.

Every node carries a primary vector ``h`` and an auxiliary vector ``l``. In
each round a node's primary vector is refreshed from its sampled neighbors'
auxiliary vectors and vice versa, so primary information only ever mixes
between nodes of the same side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import scipy.sparse as sp

from .errors import EmptyGraph, EmptySample, NoKnownNeighbors, ShapeMismatch
from .graph import BipartiteGraph

NORM_EPS = 1e-12
ACTIVATIONS = ("relu", "relu_linear_out")   # the latter leaves the last round linear
ACTIVATION = "relu_linear_out"


@dataclass
class BisageParams:
    """Layer matrices plus the structural hyperparameters."""

    d: int
    K: int
    n_samples: int
    W_h: list[np.ndarray]
    W_l: list[np.ndarray]
    activation: str = ACTIVATION

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 1 <= self.n_samples <= 1024:
            raise ValueError("n_samples must lie in [1, 1024]")
        if len(self.W_h) != self.K or len(self.W_l) != self.K:
            raise ShapeMismatch(f"expected {self.K} matrices per family")
        for W in (*self.W_h, *self.W_l):
            if W.shape != (self.d, 2 * self.d):
                raise ShapeMismatch(f"matrix shape {W.shape} != {(self.d, 2 * self.d)}")

    @classmethod
    def initialize(cls, d=32, K=2, n_samples=15, rng=None,
                   activation=ACTIVATION) -> "BisageParams":
        """Glorot-uniform layer matrices."""
        rng = np.random.default_rng(rng)
        lim = np.sqrt(6.0 / (3 * d))
        W_h = [rng.uniform(-lim, lim, (d, 2 * d)) for _ in range(K)]
        W_l = [rng.uniform(-lim, lim, (d, 2 * d)) for _ in range(K)]
        return cls(d, K, n_samples, W_h, W_l, activation)

    def is_linear(self, k: int) -> bool:
        """Whether round ``k`` (0-based) skips the rectifier."""
        return self.activation == "relu_linear_out" and k == self.K - 1

    def matrices(self) -> list[np.ndarray]:
        return [*self.W_h, *self.W_l]

    def copy(self) -> "BisageParams":
        return BisageParams(self.d, self.K, self.n_samples,
                            [W.copy() for W in self.W_h], [W.copy() for W in self.W_l],
                            self.activation)

    def to_dict(self) -> dict:
        return {
            "d": self.d, "K": self.K, "n_samples": self.n_samples,
            "activation": self.activation,
            "shape": [self.d, 2 * self.d],
            "W_h": [W.ravel().tolist() for W in self.W_h],
            "W_l": [W.ravel().tolist() for W in self.W_l],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BisageParams":
        shape = tuple(obj["shape"])
        mk = lambda rows: [np.asarray(r, dtype=np.float64).reshape(shape) for r in rows]
        return cls(obj["d"], obj["K"], obj["n_samples"], mk(obj["W_h"]), mk(obj["W_l"]),
                   obj.get("activation", ACTIVATION))


@dataclass
class EmbeddingPair:
    h: np.ndarray
    l: np.ndarray


@dataclass
class EmbeddingTable:
    """Primary and auxiliary vectors for every node, row ``i`` = node ``i``."""

    H: np.ndarray
    L: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def __getitem__(self, i) -> EmbeddingPair:
        return EmbeddingPair(self.H[i], self.L[i])

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.H.copy(), self.L.copy())

    def append(self, h: np.ndarray, l: np.ndarray) -> None:
        self.H = np.vstack([self.H, h[None, :]])
        self.L = np.vstack([self.L, l[None, :]])

    def to_dict(self) -> dict:
        return {"H": self.H.ravel().tolist(), "L": self.L.ravel().tolist(),
                "shape": list(self.H.shape)}

    @classmethod
    def from_dict(cls, obj: dict) -> "EmbeddingTable":
        shape = tuple(obj["shape"])
        return cls(np.asarray(obj["H"], dtype=np.float64).reshape(shape),
                   np.asarray(obj["L"], dtype=np.float64).reshape(shape))


def random_unit_vectors(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def init_embeddings(graph: BipartiteGraph, d: int, rng) -> EmbeddingTable:
    """Independent uniformly random unit vectors for every node."""
    if graph.num_nodes == 0:
        raise EmptyGraph("cannot initialise embeddings of an empty graph")
    rng = np.random.default_rng(rng)
    H = random_unit_vectors(graph.num_nodes, d, rng)
    L = random_unit_vectors(graph.num_nodes, d, rng)
    return EmbeddingTable(H, L)


def weighted_aggregate(vectors: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weight-normalised sum of neighbor vectors (duplicates count per draw)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) == 0:
        raise EmptySample("no sampled neighbors to aggregate")
    if vectors.shape[0] != len(weights):
        raise ShapeMismatch(f"{vectors.shape[0]} vectors vs {len(weights)} weights")
    return (weights / weights.sum()) @ vectors


def l2_normalize(A: np.ndarray):
    """Row-normalise ``A``; rows with norm below NORM_EPS are left untouched."""
    norms = np.linalg.norm(A, axis=1)
    ok = norms >= NORM_EPS
    out = A.copy()
    out[ok] /= norms[ok, None]
    return out, norms, ok


@dataclass
class LayerTrace:
    """Everything one round needs for replay and backpropagation."""

    active: np.ndarray          # target rows (positions in the source arrays)
    samples: np.ndarray         # (n_active, N_s) neighbor positions in the source arrays
    agg: object                 # (n_active, n_source) aggregation operator, dense or CSR
    X_h: np.ndarray             # CONCAT(h_i, agg of neighbor l)
    X_l: np.ndarray             # CONCAT(l_i, agg of neighbor h)
    Z_h: np.ndarray             # pre-activations
    Z_l: np.ndarray
    norm_h: np.ndarray
    norm_l: np.ndarray
    ok_h: np.ndarray
    ok_l: np.ndarray
    linear: bool


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    H: list[np.ndarray] = field(default_factory=list)    # snapshots, H[k] after round k
    L: list[np.ndarray] = field(default_factory=list)

    def samples(self) -> list[np.ndarray]:
        return [lt.samples for lt in self.layers]


DENSE_AGG_LIMIT = 1 << 18   # entries; small operators are faster dense


def _aggregation_matrix(samples, weights, n_source):
    """Row-stochastic (n_active, n_source) operator built from the samples.

    Duplicate draws add up. Dense for small problems, CSR otherwise.
    """
    n, s = samples.shape
    A = weights / weights.sum(axis=1, keepdims=True)
    if n * n_source <= DENSE_AGG_LIMIT:
        flat = (np.arange(n)[:, None] * n_source + samples).ravel()
        return np.bincount(flat, A.ravel(), minlength=n * n_source).reshape(n, n_source)
    indptr = np.arange(0, n * s + 1, s)
    return sp.csr_matrix((A.ravel(), samples.ravel(), indptr), shape=(n, n_source))


def activate(Z: np.ndarray, linear: bool) -> np.ndarray:
    return Z if linear else np.maximum(Z, 0.0)


def _layer(H_prev, L_prev, active, samples, weights, W_h, W_l, linear):
    """One aggregation round for the ``active`` rows.

    Returns the new rows for ``active`` and the layer trace.
    """
    agg = _aggregation_matrix(samples, weights, H_prev.shape[0])
    X_h = np.hstack([H_prev[active], agg @ L_prev])
    X_l = np.hstack([L_prev[active], agg @ H_prev])
    Z_h = X_h @ W_h.T
    Z_l = X_l @ W_l.T
    h_new, norm_h, ok_h = l2_normalize(activate(Z_h, linear))
    l_new, norm_l, ok_l = l2_normalize(activate(Z_l, linear))
    lt = LayerTrace(active, samples, agg, X_h, X_l, Z_h, Z_l, norm_h, norm_l, ok_h, ok_l, linear)
    return h_new, l_new, lt


def bi_level_forward(graph: BipartiteGraph, params: BisageParams, table0: EmbeddingTable,
                     rng=None, replay: Optional[list[np.ndarray]] = None):
    """Run K rounds over the whole graph.

    Neighbor samples are redrawn for every node and round unless ``replay``
    supplies the per-round sample arrays of a previous trace. Returns the
    final :class:`EmbeddingTable` and the :class:`ForwardTrace`.
    """
    N = graph.num_nodes
    if table0.num_nodes != N:
        raise ShapeMismatch(f"table covers {table0.num_nodes} nodes, graph has {N}")
    if table0.d != params.d:
        raise ShapeMismatch(f"table dimension {table0.d} != params.d {params.d}")
    rng = np.random.default_rng(rng)
    active = np.flatnonzero(graph.degrees() > 0)
    trace = ForwardTrace(H=[table0.H.copy()], L=[table0.L.copy()])
    H, L = trace.H[0], trace.L[0]
    for k in range(params.K):
        if replay is not None:
            samples = replay[k]
            weights = graph.weights_for(active, samples)
        else:
            samples, weights = graph.sample_many_weighted(active, params.n_samples, rng)
        h_new, l_new, lt = _layer(H, L, active, samples, weights, params.W_h[k], params.W_l[k],
                                  params.is_linear(k))
        H, L = H.copy(), L.copy()
        H[active] = h_new
        L[active] = l_new
        trace.layers.append(lt)
        trace.H.append(H)
        trace.L.append(L)
    return EmbeddingTable(H.copy(), L.copy()), trace


def has_known_neighbor(graph: BipartiteGraph, node: int) -> bool:
    """True if some neighbor of ``node`` is connected to another node too."""
    return any(graph.degree(j) > 1 for j in graph.adj[node])


def infer_embedding(graph: BipartiteGraph, params: BisageParams, table0: EmbeddingTable,
                    node: int, rng=None,
                    replay: Optional[Mapping[tuple[int, int], np.ndarray]] = None) -> EmbeddingPair:
    """Embed one node from its K-hop sampled neighborhood.

    Only the computation tree rooted at ``node`` is evaluated; ``table0``
    supplies the round-0 vectors and is never modified. ``replay`` maps
    ``(round_index, node)`` to a sample array and overrides fresh draws for
    those entries (round_index counts from 0).
    """
    if graph.degree(node) == 0 or not has_known_neighbor(graph, node):
        raise NoKnownNeighbors(f"node {node} has no neighbor known to the graph")
    if node >= table0.num_nodes:
        raise ShapeMismatch(f"no round-0 vectors for node {node}")
    rng = np.random.default_rng(rng)
    K, s = params.K, params.n_samples

    # Top-down: which nodes are needed at each round, and their samples.
    needed = [None] * (K + 1)
    draws = [None] * (K + 1)
    needed[K] = np.array([node])
    for k in range(K, 0, -1):
        targets = needed[k]
        act = np.array([t for t in targets.tolist() if graph.degree(t) > 0], dtype=np.int64)
        rows, wrows = [], []
        for t in act.tolist():
            key = (k - 1, t)
            if replay is not None and key in replay:
                r = np.asarray(replay[key], dtype=np.int64)
                rows.append(r)
                wrows.append(np.array([graph.adj[t][j] for j in r.tolist()]))
            else:
                r, w = graph.sample_neighbors_weighted(t, s, rng)
                rows.append(r)
                wrows.append(w)
        smp = np.vstack(rows) if rows else np.empty((0, s), dtype=np.int64)
        wts = np.vstack(wrows) if wrows else np.empty((0, s))
        draws[k] = (act, smp, wts)
        needed[k - 1] = np.unique(np.concatenate([targets, smp.ravel()]))

    # every needed[k] is sorted, so positions come from searchsorted
    src = needed[0]
    H = table0.H[src]
    L = table0.L[src]
    for k in range(1, K + 1):
        act, smp, wts = draws[k]
        targets = needed[k]
        h_new, l_new, _ = _layer(H, L, np.searchsorted(src, act), np.searchsorted(src, smp),
                                 wts, params.W_h[k - 1], params.W_l[k - 1],
                                 params.is_linear(k - 1))
        t_pos = np.searchsorted(src, targets)
        H_next, L_next = H[t_pos], L[t_pos]
        a_in_t = np.searchsorted(targets, act)
        H_next[a_in_t] = h_new
        L_next[a_in_t] = l_new
        H, L, src = H_next, L_next, targets
    return EmbeddingPair(H[0].copy(), L[0].copy())
