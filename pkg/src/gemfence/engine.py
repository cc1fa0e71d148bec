"""End-to-end geofencing model: bootstrap, streaming ingest, persistence."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .bisage import (ACTIVATION, BisageParams, EmbeddingTable, infer_embedding, init_embeddings,
                     random_unit_vectors)
from .detector import (DEFAULT_BINS, DEFAULT_EPS, DEFAULT_T, DEFAULT_TAU_L, DEFAULT_TAU_U,
                       Decision, HistogramDetector, OutlierScore, Verdict)
from .errors import (CorruptModel, GemError, NoKnownNeighbors, TooFewRecords, VersionMismatch)
from .graph import RECORD, BipartiteGraph, SignalRecord
from .trainer import TrainConfig, train

FORMAT_VERSION = 1
SENTINEL = OutlierScore(float("inf"), 1.0, 1.0)


@dataclass(frozen=True)
class EngineConfig:
    d: int = 32
    K: int = 2
    n_samples: int = 25
    offset: float = 120.0
    bins: int = DEFAULT_BINS
    T: float = DEFAULT_T
    tau_u: float = DEFAULT_TAU_U
    tau_l: float = DEFAULT_TAU_L
    eps: float = DEFAULT_EPS
    learning_rate: float = 0.003
    epochs: int = 50
    minibatch_size: int = 64
    negatives: int = 4
    walks_per_node: int = 5
    walk_length: int = 8
    optimizer: str = "adam"
    activation: str = ACTIVATION
    batch_update_size: int = 1
    online_update: bool = True
    new_mac_init: str = "random"
    min_records: int = 10
    max_records: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_l < self.tau_u < 1:
            raise ValueError("need 0 < tau_l < tau_u < 1")
        if self.batch_update_size < 1:
            raise ValueError("batch_update_size must be >= 1")
        if self.new_mac_init not in ("random", "neighbors"):
            raise ValueError("new_mac_init must be 'random' or 'neighbors'")

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.minibatch_size, self.negatives,
                           self.walks_per_node, self.walk_length, self.seed, self.optimizer)

    @property
    def detector_kwargs(self) -> dict:
        return dict(bins=self.bins, T=self.T, tau_u=self.tau_u, tau_l=self.tau_l, eps=self.eps)

    def replace(self, **changes) -> "EngineConfig":
        return EngineConfig(**{**asdict(self), **changes})


@dataclass
class IngestResult:
    record_id: str
    verdict: Optional[Verdict]
    updated: bool
    latency_us: int
    error: Optional[str] = None

    @property
    def decision(self) -> Optional[str]:
        return self.verdict.decision.value if self.verdict else None

    def to_json(self, with_latency: bool = True) -> dict:
        if self.verdict is None:
            out = {"id": self.record_id, "error": self.error}
        else:
            out = {"id": self.record_id, "decision": self.decision,
                   "s_t": self.verdict.score.enhanced, "updated": self.updated}
        if with_latency:
            out["latency_us"] = self.latency_us
        return out


def _node_rng(seed: int, node: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, node, stream])


class GemModel:
    """Composed graph, embedding parameters, and detector.

    Use :func:`bootstrap` or :meth:`load` to obtain one.
    """

    def __init__(self, config: EngineConfig, graph: BipartiteGraph, params: BisageParams,
                 table0: EmbeddingTable, table: EmbeddingTable, detector: HistogramDetector,
                 members: list[int], losses: Sequence[float] = ()):
        self.config = config
        self.graph = graph
        self.params = params
        self.table0 = table0
        self.table = table
        self.detector = detector
        self.members = list(members)
        self.losses = list(losses)
        self.pending: list[tuple[int, np.ndarray]] = []
        self.audit: list[tuple[str, float, bool]] = []

    # -- streaming -----------------------------------------------------
    def _grow_tables(self, first_new: int) -> None:
        """Round-0 vectors for the nodes a single ``add_record`` appended.

        Every new node gets fresh random vectors, like the training nodes.
        With ``new_mac_init="neighbors"`` a MAC the graph has never seen
        instead starts at the RSS-weighted mean of the round-0 vectors of the
        known MACs heard in the same record, so it enters the embedding space
        where it was observed rather than in a direction no trained node
        occupies.
        """
        g = self.graph
        seed = self.config.seed
        known = []
        if (self.config.new_mac_init == "neighbors" and first_new < g.num_nodes
                and g.side[first_new] == RECORD):
            known = [(j, w) for j, w in g.adj[first_new].items() if j < first_new]
        for idx in range(first_new, g.num_nodes):
            vecs = random_unit_vectors(2, self.config.d, _node_rng(seed, idx, 0))
            if g.side[idx] != RECORD and known:
                cols = [j for j, _ in known]
                w = np.array([w for _, w in known])
                h, l = w @ self.table0.H[cols], w @ self.table0.L[cols]
                nh, nl = np.linalg.norm(h), np.linalg.norm(l)
                if nh > 0 and nl > 0:
                    vecs = np.vstack([h / nh, l / nl])
            self.table0.append(vecs[0], vecs[1])
            self.table.append(vecs[0], vecs[1])

    def ingest(self, record: SignalRecord) -> IngestResult:
        """Classify one record and, if it is a confident inlier, absorb it."""
        t0 = time.perf_counter_ns()
        first_new = self.graph.num_nodes
        try:
            u = self.graph.add_record(record)
        except GemError as exc:
            return IngestResult(record.id, None, False,
                                (time.perf_counter_ns() - t0) // 1000, f"{type(exc).__name__}: {exc}")
        self._grow_tables(first_new)
        try:
            pair = infer_embedding(self.graph, self.params, self.table0, u,
                                   _node_rng(self.config.seed, u, 1))
        except NoKnownNeighbors:
            verdict = Verdict(Decision.OUT, SENTINEL, False)
        else:
            self.table.H[u] = pair.h
            self.table.L[u] = pair.l
            verdict = self.detector.classify(pair.h)
        updated = verdict.confident_in and self.config.online_update
        if updated:
            self.pending.append((u, self.table.H[u].copy()))
            if len(self.pending) >= self.config.batch_update_size:
                self.flush()
        self.audit.append((record.id, verdict.score.enhanced, updated))
        self._evict()
        latency = (time.perf_counter_ns() - t0) // 1000
        return IngestResult(record.id, verdict, updated, latency)

    def ingest_many(self, records: Iterable[SignalRecord]) -> list[IngestResult]:
        return [self.ingest(r) for r in records]

    def flush(self) -> None:
        """Absorb every queued confident embedding into the detector."""
        if not self.pending:
            return
        self.detector = self.detector.absorb(np.vstack([h for _, h in self.pending]))
        self.members.extend(u for u, _ in self.pending)
        self.pending = []

    def _evict(self) -> None:
        cap = self.config.max_records
        if cap is None:
            return
        protected = set(self.members) | {u for u, _ in self.pending}
        attached = [u for u in self.graph.record_index.values() if self.graph.degree(u) > 0]
        excess = len(attached) - cap
        for u in attached:
            if excess <= 0:
                break
            if u not in protected:
                self.graph.detach_record(u)
                excess -= 1

    def classify_embedding(self, h) -> Verdict:
        return self.detector.classify(h)

    def copy(self) -> "GemModel":
        return copy.deepcopy(self)

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "engine_config": asdict(self.config),
            "graph": self.graph.to_dict(),
            "bisage": {
                "params": self.params.to_dict(),
                "table0": self.table0.to_dict(),
                "embeddings": self.table.to_dict(),
            },
            "detector": self.detector.to_dict(),
            "members": self.members,
            "pending": [[u, h.tolist()] for u, h in self.pending],
            "losses": self.losses,
        }

    def dumps(self) -> str:
        doc = self.to_dict()
        body = _canonical(doc)
        doc["checksum"] = hashlib.sha256(body.encode("utf-8")).hexdigest()
        return _canonical(doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "GemModel":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise CorruptModel(f"model file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or "version" not in doc:
            raise CorruptModel("model file lacks a version field")
        if doc["version"] != FORMAT_VERSION:
            raise VersionMismatch(f"model format {doc['version']} != supported {FORMAT_VERSION}")
        checksum = doc.pop("checksum", None)
        if checksum != hashlib.sha256(_canonical(doc).encode("utf-8")).hexdigest():
            raise CorruptModel("checksum mismatch")
        try:
            config = EngineConfig(**doc["engine_config"])
            model = cls(config, BipartiteGraph.from_dict(doc["graph"]),
                        BisageParams.from_dict(doc["bisage"]["params"]),
                        EmbeddingTable.from_dict(doc["bisage"]["table0"]),
                        EmbeddingTable.from_dict(doc["bisage"]["embeddings"]),
                        HistogramDetector.from_dict(doc["detector"]),
                        doc["members"], doc["losses"])
            model.pending = [(u, np.asarray(h, dtype=np.float64)) for u, h in doc["pending"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptModel(f"malformed model content: {exc}") from None
        return model

    @classmethod
    def load(cls, path) -> "GemModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def bootstrap(records: Sequence[SignalRecord], config: EngineConfig = EngineConfig()) -> GemModel:
    """Build the graph from in-premises records, train embeddings, fit the detector."""
    if len(records) < max(1, config.min_records):
        raise TooFewRecords(f"need at least {config.min_records} records, got {len(records)}")
    graph = BipartiteGraph(config.offset)
    for rec in records:
        graph.add_record(rec)
    init_rng, param_rng, train_rng = [np.random.default_rng(s)
                                      for s in np.random.SeedSequence(config.seed).spawn(3)]
    table0 = init_embeddings(graph, config.d, init_rng)
    params = BisageParams.initialize(config.d, config.K, config.n_samples, param_rng,
                                     config.activation)
    result = train(graph, config.train_config, params, table0, train_rng)
    members = graph.record_nodes()
    # members are embedded exactly like streamed records, so both share one
    # sampling-noise model
    table = result.table
    for u in members:
        pair = infer_embedding(graph, result.params, table0, u, _node_rng(config.seed, u, 1))
        table.H[u] = pair.h
        table.L[u] = pair.l
    detector = HistogramDetector.fit(table.H[members], **config.detector_kwargs)
    return GemModel(config, graph, result.params, result.table0, table, detector,
                    members, result.losses)
