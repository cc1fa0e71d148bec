"""Dynamic weighted bipartite graph of signal records and MAC addresses.

Record nodes and MAC nodes share a single append-only index space; the side
of each node is tracked separately. Edge weights are ``rss + c`` and must be
strictly positive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    DuplicateRecordId,
    EmptyReadings,
    IsolatedNode,
    RecordParseError,
    RssOutOfRange,
    WeightNotPositive,
)

log = logging.getLogger(__name__)

RECORD = 0
MAC = 1

DEFAULT_OFFSET = 120.0
DEFAULT_RSS_BOUNDS = (-120.0, 0.0)


@dataclass
class SignalRecord:
    """One sensing event: a set of (mac, rss_dbm) readings."""

    id: str
    timestamp: int
    readings: list[tuple[str, float]]
    label: Optional[str] = None
    # ground-truth position, only known for simulated records; never serialised
    position: Optional[tuple] = field(default=None, compare=False, repr=False)

    def deduplicated(self) -> "SignalRecord":
        """Return a copy keeping the strongest reading per MAC.

        First-seen order of MACs is preserved.
        """
        best: dict[str, float] = {}
        for mac, rss in self.readings:
            rss = float(rss)
            if mac not in best or rss > best[mac]:
                best[mac] = rss
        return SignalRecord(self.id, self.timestamp, list(best.items()), self.label, self.position)

    def validate(self, bounds=DEFAULT_RSS_BOUNDS) -> None:
        if not self.readings:
            raise EmptyReadings(f"record {self.id!r} has no readings")
        lo, hi = bounds
        for mac, rss in self.readings:
            if not np.isfinite(rss) or rss < lo or rss > hi:
                raise RssOutOfRange(
                    f"record {self.id!r}: rss {rss} for {mac!r} outside [{lo}, {hi}]"
                )

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "ts": int(self.timestamp),
            "readings": [{"mac": m, "rss_dbm": r} for m, r in self.readings],
        }
        if self.label is not None:
            out["label"] = self.label
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SignalRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        try:
            rid = obj["id"]
            ts = obj["ts"]
            raw = obj["readings"]
        except KeyError as exc:
            raise ValueError(f"missing key {exc.args[0]!r}") from None
        if not isinstance(rid, str):
            raise ValueError("'id' must be a string")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise ValueError("'ts' must be an integer")
        if not isinstance(raw, list):
            raise ValueError("'readings' must be a list")
        readings = []
        for r in raw:
            mac, rss = r["mac"], r["rss_dbm"]
            if not isinstance(mac, str) or isinstance(rss, bool) or not isinstance(rss, (int, float)):
                raise ValueError("reading needs string 'mac' and numeric 'rss_dbm'")
            readings.append((mac, float(rss)))
        label = obj.get("label")
        if label not in (None, "in", "out"):
            raise ValueError(f"label must be 'in' or 'out', got {label!r}")
        return cls(rid, ts, readings, label)


def read_records(path, strict: bool = False) -> list[SignalRecord]:
    """Read signal records from a JSON Lines file.

    Malformed lines raise :class:`RecordParseError` when ``strict`` is set,
    otherwise they are logged with their line number and skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        return list(iter_records(fh, strict=strict))


def iter_records(lines: Iterable[str], strict: bool = False) -> Iterator[SignalRecord]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = SignalRecord.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            if strict:
                raise RecordParseError(line_no, str(exc)) from exc
            log.warning("skipping malformed record on line %d: %s", line_no, exc)
            continue
        yield rec


def write_records(path, records: Iterable[SignalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 5
    walk_length: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")


class BipartiteGraph:
    """Weighted bipartite graph with an append-only node registry.

    Parameters
    ----------
    offset : float
        Constant ``c`` added to every RSS value to form the edge weight.
    rss_bounds : (float, float)
        Accepted RSS sanity range in dBm.
    """

    def __init__(self, offset: float = DEFAULT_OFFSET, rss_bounds=DEFAULT_RSS_BOUNDS):
        self.offset = float(offset)
        self.rss_bounds = (float(rss_bounds[0]), float(rss_bounds[1]))
        self.side: list[int] = []
        self.names: list[str] = []
        self.record_index: dict[str, int] = {}
        self.mac_index: dict[str, int] = {}
        self.adj: list[dict[int, float]] = []
        self.version = 0
        self._node_cache: dict[int, tuple] = {}
        self._csr_cache = None

    # -- construction -------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.side)

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adj) // 2

    def record_nodes(self) -> list[int]:
        return list(self.record_index.values())

    def mac_nodes(self) -> list[int]:
        return list(self.mac_index.values())

    def _new_node(self, side: int, name: str) -> int:
        idx = len(self.side)
        self.side.append(side)
        self.names.append(name)
        self.adj.append({})
        return idx

    def add_mac(self, mac: str) -> int:
        idx = self.mac_index.get(mac)
        if idx is None:
            idx = self._new_node(MAC, mac)
            self.mac_index[mac] = idx
            self.version += 1
            self._csr_cache = None
        return idx

    def add_record(self, record: SignalRecord) -> int:
        """Insert a record node and its edges; return the new node index."""
        if record.id in self.record_index:
            raise DuplicateRecordId(record.id)
        rec = record.deduplicated()
        rec.validate(self.rss_bounds)
        for mac, rss in rec.readings:
            if rss + self.offset <= 0:
                raise WeightNotPositive(
                    f"record {rec.id!r}: rss {rss} gives weight {rss + self.offset} <= 0"
                )
        u = self._new_node(RECORD, rec.id)
        self.record_index[rec.id] = u
        for mac, rss in rec.readings:
            v = self.add_mac(mac)
            w = rss + self.offset
            self.adj[u][v] = w
            self.adj[v][u] = w
            self._node_cache.pop(v, None)
        self.version += 1
        self._csr_cache = None
        return u

    def detach_record(self, u: int) -> None:
        """Drop all edges of record node ``u``; its index stays reserved."""
        if self.side[u] != RECORD:
            raise ValueError(f"node {u} is not a record node")
        for v in list(self.adj[u]):
            del self.adj[v][u]
            self._node_cache.pop(v, None)
        self.adj[u].clear()
        self._node_cache.pop(u, None)
        self.version += 1
        self._csr_cache = None

    # -- queries -----------------------------------------------------
    def degree(self, i: int) -> int:
        return len(self.adj[i])

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adj], dtype=np.int64)

    def weight(self, i: int, j: int) -> float:
        return self.adj[i][j]

    def _node_arrays(self, i: int):
        cached = self._node_cache.get(i)
        if cached is None:
            a = self.adj[i]
            nbrs = np.fromiter(a.keys(), dtype=np.int64, count=len(a))
            w = np.fromiter(a.values(), dtype=np.float64, count=len(a))
            cached = (nbrs, w, np.cumsum(w))
            self._node_cache[i] = cached
        return cached

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        nbrs, w, _ = self._node_arrays(i)
        return nbrs, w

    def sampling_probabilities(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        nbrs, w, _ = self._node_arrays(i)
        return nbrs, w / w.sum()

    def sample_neighbors(self, node: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` neighbors with replacement, proportional to edge weight."""
        return self.sample_neighbors_weighted(node, count, rng)[0]

    def sample_neighbors_weighted(self, node: int, count: int, rng: np.random.Generator):
        """Like :meth:`sample_neighbors` but also return the drawn edge weights."""
        nbrs, w, cum = self._node_arrays(node)
        if len(nbrs) == 0:
            raise IsolatedNode(f"node {node} has no neighbors")
        u = rng.random(count) * cum[-1]
        pos = np.minimum(np.searchsorted(cum, u, side="right"), len(nbrs) - 1)
        return nbrs[pos], w[pos]

    def random_walk(self, start: int, length: int, rng: np.random.Generator) -> list[int]:
        """Weighted random walk of ``length`` nodes starting at ``start``."""
        if self.degree(start) == 0:
            raise IsolatedNode(f"node {start} has no neighbors")
        walk = [start]
        cur = start
        for _ in range(length - 1):
            cur = int(self.sample_neighbors(cur, 1, rng)[0])
            walk.append(cur)
        return walk

    # -- vectorised sampling over many nodes ------------------------------
    def csr(self):
        """Return ``(indptr, indices, weights, cumweights)`` for the whole graph."""
        if self._csr_cache is None:
            degs = self.degrees()
            indptr = np.zeros(len(degs) + 1, dtype=np.int64)
            np.cumsum(degs, out=indptr[1:])
            indices = np.empty(indptr[-1], dtype=np.int64)
            weights = np.empty(indptr[-1], dtype=np.float64)
            for i, a in enumerate(self.adj):
                s, e = indptr[i], indptr[i + 1]
                if e > s:
                    indices[s:e] = np.fromiter(a.keys(), dtype=np.int64, count=e - s)
                    weights[s:e] = np.fromiter(a.values(), dtype=np.float64, count=e - s)
            self._csr_cache = (indptr, indices, weights, np.cumsum(weights))
            rows = np.repeat(np.arange(len(degs), dtype=np.int64), degs)
            keys = rows * len(degs) + indices
            order = np.argsort(keys, kind="stable")
            self._edge_lookup = (keys[order], weights[order])
        return self._csr_cache

    def sample_many(self, nodes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        """Weighted neighbor samples for each of ``nodes``; shape (len(nodes), count).

        All nodes must have degree >= 1.
        """
        return self.sample_many_weighted(nodes, count, rng)[0]

    def sample_many_weighted(self, nodes: np.ndarray, count: int, rng: np.random.Generator):
        """:meth:`sample_many` plus the matching edge weights."""
        indptr, indices, weights, cum = self.csr()
        nodes = np.asarray(nodes, dtype=np.int64)
        start, end = indptr[nodes], indptr[nodes + 1]
        if np.any(end == start):
            bad = int(nodes[np.argmax(end == start)])
            raise IsolatedNode(f"node {bad} has no neighbors")
        base = np.where(start > 0, cum[start - 1], 0.0)
        tot = cum[end - 1] - base
        target = base[:, None] + rng.random((len(nodes), count)) * tot[:, None]
        pos = np.searchsorted(cum, target, side="right")
        pos = np.clip(pos, start[:, None], (end - 1)[:, None])
        return indices[pos], weights[pos]

    def weights_for(self, nodes: np.ndarray, samples: np.ndarray) -> np.ndarray:
        """Edge weights ``w(nodes[i], samples[i, s])``."""
        self.csr()
        keys, weights = self._edge_lookup
        nodes = np.asarray(nodes, dtype=np.int64)
        samples = np.asarray(samples, dtype=np.int64)
        q = nodes[:, None] * self.num_nodes + samples
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        if len(keys) == 0 or np.any(keys[pos] != q):
            raise KeyError("sample is not a neighbor of its node")
        return weights[pos]

    # -- serialisation ------------------------------------------------
    def to_dict(self) -> dict:
        edges = []
        for u in self.record_index.values():
            for v, w in self.adj[u].items():
                edges.append([u, v, w])
        return {
            "offset": self.offset,
            "rss_bounds": list(self.rss_bounds),
            "nodes": [[s, n] for s, n in zip(self.side, self.names)],
            "edges": edges,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BipartiteGraph":
        g = cls(obj["offset"], tuple(obj["rss_bounds"]))
        for side, name in obj["nodes"]:
            idx = g._new_node(int(side), name)
            (g.record_index if side == RECORD else g.mac_index)[name] = idx
        for u, v, w in obj["edges"]:
            g.adj[u][v] = float(w)
            g.adj[v][u] = float(w)
        g.version = 1
        return g


def build_graph(records: Sequence[SignalRecord], offset: float = DEFAULT_OFFSET) -> BipartiteGraph:
    g = BipartiteGraph(offset)
    for rec in records:
        g.add_record(rec)
    return g
