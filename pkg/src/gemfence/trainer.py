"""Walk-based negative-sampling training of the bi-level layer matrices."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bisage import (BisageParams, EmbeddingTable, ForwardTrace, activate, bi_level_forward,
                     init_embeddings)
from .errors import (EmptyGraph, MissingForwardTrace, NoEdges, NonFiniteLoss, ShapeMismatch)
from .graph import BipartiteGraph, WalkConfig

log = logging.getLogger(__name__)


class SGD:
    """Plain gradient descent."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for W, g in zip(params, grads):
            W -= self.lr * g


class Adam:
    """Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Optional[list[np.ndarray]] = None
        self.v: Optional[list[np.ndarray]] = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(W) for W in params]
            self.v = [np.zeros_like(W) for W in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for W, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            W -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    epochs: int = 50
    minibatch_size: int = 64
    negatives: int = 4
    walks_per_node: int = 5
    walk_length: int = 8
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.epochs < 0 or self.minibatch_size < 1:
            raise ValueError("epochs must be >= 0 and minibatch_size >= 1")

    @property
    def walk_config(self) -> WalkConfig:
        return WalkConfig(self.walks_per_node, self.walk_length, self.seed)


class NegativeSampler:
    """Draws nodes with probability proportional to degree ** 0.75."""

    def __init__(self, degrees):
        degrees = np.asarray(degrees, dtype=np.float64)
        if degrees.size == 0 or degrees.sum() <= 0:
            raise EmptyGraph("negative sampler needs at least one node with an edge")
        mass = degrees ** 0.75
        self.degrees = degrees
        self.probs = mass / mass.sum()
        self._cdf = np.cumsum(self.probs)

    @classmethod
    def from_graph(cls, graph: BipartiteGraph) -> "NegativeSampler":
        return cls(graph.degrees())

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(size) * self._cdf[-1]
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), len(self._cdf) - 1)


def sample_negatives(sampler: NegativeSampler, k: int, rng) -> np.ndarray:
    return sampler.sample(k, rng)


def generate_pairs(graph: BipartiteGraph, walk_config: WalkConfig, rng) -> np.ndarray:
    """Consecutive-visit pairs from weighted walks started at every node.

    Returns an int array of shape (n_pairs, 2); pairs of one walk are
    contiguous and in visiting order.
    """
    if graph.num_edges == 0:
        raise NoEdges("graph has no edges")
    rng = np.random.default_rng(rng)
    starts = np.flatnonzero(graph.degrees() > 0)
    cur = np.repeat(starts, walk_config.walks_per_node)
    steps = [cur]
    for _ in range(walk_config.walk_length - 1):
        cur = graph.sample_many(cur, 1, rng)[:, 0]
        steps.append(cur)
    walks = np.stack(steps, axis=1)
    return np.stack([walks[:, :-1], walks[:, 1:]], axis=2).reshape(-1, 2)


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def loss(pair, negatives, table: EmbeddingTable) -> float:
    """Negative-sampling loss of one ``(x, y)`` pair against ``negatives``."""
    x, y = pair
    negatives = np.asarray(negatives)
    H, L = table.H, table.L
    if H.shape != L.shape:
        raise ShapeMismatch("primary and auxiliary tables differ in shape")
    pos = _log_sigmoid(H[x] @ L[y]) + _log_sigmoid(L[x] @ H[y])
    neg = _log_sigmoid(-(L[negatives] @ H[x])) + _log_sigmoid(-(H[negatives] @ L[x]))
    return float(-pos - neg.sum())


def batch_loss_and_output_grads(pairs, negatives, H, L):
    """Mean loss over the batch and its gradient w.r.t. the final tables."""
    pairs = np.asarray(pairs)
    negatives = np.asarray(negatives)
    B = len(pairs)
    x, y = pairs[:, 0], pairs[:, 1]
    hx, lx, hy, ly = H[x], L[x], H[y], L[y]
    hz, lz = H[negatives], L[negatives]              # (B, K_N, d)
    a = np.einsum("bd,bd->b", hx, ly)
    b = np.einsum("bd,bd->b", lx, hy)
    c = np.einsum("bd,bkd->bk", hx, lz)
    e = np.einsum("bd,bkd->bk", lx, hz)
    J = -(_log_sigmoid(a) + _log_sigmoid(b)).sum() - (_log_sigmoid(-c) + _log_sigmoid(-e)).sum()
    J /= B

    ga = -_sigmoid(-a)[:, None] / B
    gb = -_sigmoid(-b)[:, None] / B
    gc = _sigmoid(c)[:, :, None] / B
    ge = _sigmoid(e)[:, :, None] / B
    d = H.shape[1]
    neg = negatives.ravel()
    idx = np.concatenate([x, y, neg])
    gH = np.zeros_like(H)
    gL = np.zeros_like(L)
    np.add.at(gH, idx, np.concatenate([ga * ly + (gc * lz).sum(axis=1), gb * lx,
                                       (ge * lx[:, None, :]).reshape(-1, d)]))
    np.add.at(gL, idx, np.concatenate([gb * hy + (ge * hz).sum(axis=1), ga * hx,
                                       (gc * hx[:, None, :]).reshape(-1, d)]))
    return float(J), gH, gL


def _normalize_backward(g, Z, norm, ok, linear):
    a = activate(Z, linear)
    ga = np.zeros_like(g)
    y = a[ok] / norm[ok, None]
    ga[ok] = (g[ok] - y * np.einsum("nd,nd->n", y, g[ok])[:, None]) / norm[ok, None]
    return ga if linear else ga * (Z > 0)


def gradients(pairs, negatives, trace: Optional[ForwardTrace], params: BisageParams):
    """Exact gradient of the minibatch-mean loss w.r.t. every layer matrix.

    Returns ``(loss, grads_h, grads_l)`` where the gradient lists align with
    ``params.W_h`` and ``params.W_l``.
    """
    if trace is None or len(trace.layers) != params.K:
        raise MissingForwardTrace("a complete forward trace is required")
    d = params.d
    J, gH, gL = batch_loss_and_output_grads(pairs, negatives, trace.H[-1], trace.L[-1])
    grads_h = [None] * params.K
    grads_l = [None] * params.K
    for k in range(params.K - 1, -1, -1):
        lt = trace.layers[k]
        act = lt.active
        gZ_h = _normalize_backward(gH[act], lt.Z_h, lt.norm_h, lt.ok_h, lt.linear)
        gZ_l = _normalize_backward(gL[act], lt.Z_l, lt.norm_l, lt.ok_l, lt.linear)
        grads_h[k] = gZ_h.T @ lt.X_h
        grads_l[k] = gZ_l.T @ lt.X_l
        gX_h = gZ_h @ params.W_h[k]
        gX_l = gZ_l @ params.W_l[k]
        # inactive (isolated) rows copy through unchanged
        gH_prev = gH.copy()
        gL_prev = gL.copy()
        gH_prev[act] = gX_h[:, :d]
        gL_prev[act] = gX_l[:, :d]
        gL_prev += lt.agg.T @ gX_h[:, d:]
        gH_prev += lt.agg.T @ gX_l[:, d:]
        gH, gL = gH_prev, gL_prev
    return J, grads_h, grads_l


@dataclass
class TrainResult:
    params: BisageParams
    table0: EmbeddingTable
    table: EmbeddingTable
    losses: list[float] = field(default_factory=list)

    def write_losses(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for epoch, value in enumerate(self.losses, start=1):
                fh.write(json.dumps({"epoch": epoch, "mean_loss": value}) + "\n")


def train(graph: BipartiteGraph, config: TrainConfig, params: BisageParams,
          table0: Optional[EmbeddingTable] = None, rng=None) -> TrainResult:
    """Minibatch SGD on the layer matrices; round-0 vectors stay fixed.

    ``params`` holds the starting matrices and is not modified.
    """
    if graph.num_edges == 0:
        raise NoEdges("graph has no edges")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if table0 is None:
        table0 = init_embeddings(graph, params.d, rng)
    params = params.copy()
    sampler = NegativeSampler.from_graph(graph)
    opt = OPTIMIZERS[config.optimizer](config.learning_rate)
    losses: list[float] = []
    for epoch in range(config.epochs):
        pairs = generate_pairs(graph, config.walk_config, rng)
        pairs = pairs[rng.permutation(len(pairs))]
        total = 0.0
        for start in range(0, len(pairs), config.minibatch_size):
            batch = pairs[start:start + config.minibatch_size]
            _, trace = bi_level_forward(graph, params, table0, rng)
            negs = sampler.sample((len(batch), config.negatives), rng)
            J, g_h, g_l = gradients(batch, negs, trace, params)
            if not np.isfinite(J):
                raise NonFiniteLoss(f"loss became {J} in epoch {epoch + 1} at pair offset {start}")
            total += J * len(batch)
            if config.learning_rate:
                opt.step(params.W_h + params.W_l, g_h + g_l)
        losses.append(total / len(pairs))
        log.debug("epoch %d mean loss %.6f", epoch + 1, losses[-1])
    table, _ = bi_level_forward(graph, params, table0, rng)
    return TrainResult(params, table0, table, losses)
