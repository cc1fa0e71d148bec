"""Metrics, ROC curves, ablation baselines, and the experiment protocols.

Every protocol is deterministic given its :class:`ExperimentSpec`: random
choices are drawn from generators seeded by ``(seed, condition, repeat)``,
repeats are reduced in seed order, and reports carry no timing values.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .detector import Decision, HistogramDetector, Verdict
from .engine import SENTINEL, EngineConfig, GemModel, IngestResult, bootstrap
from .errors import IdMismatch, MissingFixture, SingleClass
from .graph import SignalRecord, read_records
from .rfsim import MarkovOnOff, apply_markov_onoff, default_fixture

log = logging.getLogger(__name__)

PROTOCOLS = ("training_ratio", "update_ratio", "mac_removal_train", "mac_removal_test",
             "markov_sweep", "baseline_compare", "roc")
METRIC_KEYS = ("P_in", "R_in", "F_in", "P_out", "R_out", "F_out")
PAD_DBM = -120.0


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class DirectionMetrics:
    P: float
    R: float
    F: float
    TP: int
    FP: int
    FN: int
    TN: int
    precision_undefined: bool = False


def _direction(truth: np.ndarray, pred: np.ndarray) -> DirectionMetrics:
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    tn = int(np.sum(~truth & ~pred))
    undefined = tp + fp == 0
    P = 0.0 if undefined else tp / (tp + fp)
    R = tp / (tp + fn) if tp + fn else 0.0
    F = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return DirectionMetrics(P, R, F, tp, fp, fn, tn, undefined)


@dataclass(frozen=True)
class MetricsReport:
    """Precision, recall and F for both directions.

    The in-direction treats in-premises as positive, the out-direction
    treats outside as positive.
    """

    inside: DirectionMetrics
    outside: DirectionMetrics
    n: int

    @property
    def P_in(self): return self.inside.P

    @property
    def R_in(self): return self.inside.R

    @property
    def F_in(self): return self.inside.F

    @property
    def P_out(self): return self.outside.P

    @property
    def R_out(self): return self.outside.R

    @property
    def F_out(self): return self.outside.F

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {"n": self.n, "in": asdict(self.inside), "out": asdict(self.outside)}


def _pair_id(item) -> tuple[str, Optional[str]]:
    if isinstance(item, IngestResult):
        return item.record_id, item.decision
    if isinstance(item, SignalRecord):
        return item.id, item.label
    rid, value = item
    if isinstance(value, Decision):
        value = value.value
    elif isinstance(value, Verdict):
        value = value.decision.value
    return rid, value


def metrics(verdicts, labels) -> MetricsReport:
    """Score verdicts against ground truth.

    Both arguments are sequences aligned by record id. ``verdicts`` holds
    :class:`IngestResult` objects or ``(id, decision)`` pairs; ``labels``
    holds labelled :class:`SignalRecord` objects or ``(id, label)`` pairs.
    A verdict without a decision (an ingest error) counts as ``out``.
    """
    v = [_pair_id(x) for x in verdicts]
    g = [_pair_id(x) for x in labels]
    if len(v) != len(g):
        raise IdMismatch(f"{len(v)} verdicts for {len(g)} labels")
    for k, ((vid, _), (gid, lab)) in enumerate(zip(v, g)):
        if vid != gid:
            raise IdMismatch(f"position {k}: verdict id {vid!r} != label id {gid!r}")
        if lab not in ("in", "out"):
            raise IdMismatch(f"record {gid!r} has no in/out label")
    truth_in = np.array([lab == "in" for _, lab in g], dtype=bool)
    pred_in = np.array([dec == "in" for _, dec in v], dtype=bool)
    return MetricsReport(_direction(truth_in, pred_in), _direction(~truth_in, ~pred_in), len(v))


# -- ROC --------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> set:
        return set(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self) -> str:
        rows = ["fpr,tpr,threshold"]
        rows += [f"{f!r},{t!r},{th!r}" for f, t, th in zip(self.fpr.tolist(), self.tpr.tolist(),
                                                         self.thresholds.tolist())]
        return "\n".join(rows) + "\n"


def roc(scores, labels) -> RocCurve:
    """ROC of outlier scores with ``out`` as the positive class.

    ``labels`` are booleans (True = outside) or ``"in"``/``"out"`` strings.
    A sample is flagged when its score is >= the threshold; the first point
    uses threshold +inf and flags nothing.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([lab == "out" if isinstance(lab, str) else bool(lab) for lab in labels])
    if s.shape != y.shape:
        raise IdMismatch("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs at least one sample of each class")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]   # end of each tie group
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds, float(np.trapezoid(tpr, fpr)))


# -- baselines ----------------------------------------------------------------

class MatrixImputationBaseline:
    """Detector fed padded RSS rows instead of graph embeddings.

    Rows span the MACs seen in the bootstrap records; missing entries are
    padded with -120 dBm. Streamed MACs that were never seen are ignored, a
    record with no known MAC is ``out``, and gating plus absorption follow
    the embedding model.
    """

    def __init__(self, records: Sequence[SignalRecord], config: EngineConfig = EngineConfig()):
        self.config = config
        self.macs = sorted({m for r in records for m, _ in r.deduplicated().readings})
        self.index = {m: j for j, m in enumerate(self.macs)}
        rows = [self.vectorize(r) for r in records]
        self.detector = HistogramDetector.fit(np.vstack([x for x in rows if x is not None]),
                                              **config.detector_kwargs)

    def vectorize(self, record: SignalRecord) -> Optional[np.ndarray]:
        x = np.full(len(self.macs), PAD_DBM)
        known = False
        for mac, rss in record.deduplicated().readings:
            j = self.index.get(mac)
            if j is not None:
                x[j] = rss
                known = True
        return x if known else None

    def ingest(self, record: SignalRecord) -> IngestResult:
        t0 = time.perf_counter_ns()
        x = self.vectorize(record)
        if x is None:
            verdict = Verdict(Decision.OUT, SENTINEL, False)
        else:
            verdict = self.detector.classify(x)
        updated = verdict.confident_in and self.config.online_update
        if updated:
            self.detector = self.detector.absorb(x)
        return IngestResult(record.id, verdict, updated, (time.perf_counter_ns() - t0) // 1000)

    def ingest_many(self, records) -> list[IngestResult]:
        return [self.ingest(r) for r in records]


def contamination_verdicts(model: GemModel, records: Sequence[SignalRecord],
                           gamma: float = 0.1) -> list[IngestResult]:
    """Classify with the contamination-factor threshold on normalised scores.

    The model is not modified and nothing is absorbed.
    """
    frozen = model.copy()
    frozen.config = frozen.config.replace(online_update=False)
    thr = frozen.detector.baseline_threshold(gamma)
    out = []
    for res in frozen.ingest_many(records):
        if res.verdict is None:
            out.append(res)
            continue
        nrm = res.verdict.score.normalized
        dec = Decision.OUT if nrm > thr else Decision.IN
        out.append(IngestResult(res.record_id, Verdict(dec, res.verdict.score, False), False,
                                res.latency_us))
    return out


# -- fixtures -----------------------------------------------------------------

@dataclass
class LoadedFixture:
    train: list[SignalRecord]
    test: list[SignalRecord]


def load_fixture(path, strict: bool = False) -> LoadedFixture:
    """Read ``train.jsonl`` and ``test.jsonl`` from a directory."""
    paths = [os.path.join(path, name) for name in ("train.jsonl", "test.jsonl")]
    for p in paths:
        if not os.path.isfile(p):
            raise MissingFixture(f"fixture file not found: {p}")
    return LoadedFixture(read_records(paths[0], strict), read_records(paths[1], strict))


# -- record transforms ---------------------------------------------------------

def remove_macs(records: Sequence[SignalRecord], macs) -> list[SignalRecord]:
    """Drop every reading of ``macs``; records left empty are dropped."""
    macs = set(macs)
    if not macs:
        return list(records)
    out = []
    for r in records:
        kept = [(m, v) for m, v in r.readings if m not in macs]
        if kept:
            out.append(SignalRecord(r.id, r.timestamp, kept, r.label, r.position))
    return out


def choose_macs(records: Sequence[SignalRecord], ratio: float, rng) -> list[str]:
    """A uniform random ``ratio`` share of the distinct MACs in ``records``."""
    universe = sorted({m for r in records for m, _ in r.readings})
    k = int(round(ratio * len(universe)))
    if k == 0:
        return []
    return sorted(rng.choice(universe, size=k, replace=False).tolist())


# -- experiments ---------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    """One protocol run.

    ``params`` overrides the protocol defaults (see ``DEFAULT_PARAMS``);
    ``engine`` overrides :class:`EngineConfig` fields; ``fixture_dir``
    points at simulated files, otherwise the default fixture of each seed
    is generated in memory. ``repeats`` applies to the randomised
    protocols (MAC removal, Markov sweep).
    """

    protocol: str
    params: dict = field(default_factory=dict)
    repeats: int = 30
    seeds: tuple = (0,)
    fixture_dir: Optional[str] = None
    engine: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for key in ("ratios",):
            for r in self.params.get(key, ()):
                lo_ok = r > 0 or self.protocol.startswith("mac_removal")
                if not (lo_ok and r <= 1):
                    raise ValueError(f"ratio {r} outside the allowed range")

    def merged_params(self) -> dict:
        return {**DEFAULT_PARAMS[self.protocol], **self.params}

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentSpec":
        obj = dict(obj)
        if "seeds" in obj:
            obj["seeds"] = tuple(obj["seeds"])
        return cls(**obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["params"] = self.merged_params()
        out.pop("workers")
        return out


GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_PARAMS = {
    "training_ratio": {"ratios": [round(0.1 * k, 1) for k in range(1, 11)]},
    "update_ratio": {"chunks": 10},
    "mac_removal_train": {"ratios": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25]},
    "mac_removal_test": {"ratios": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25]},
    "markov_sweep": {"p": list(GRID), "q": list(GRID), "period": 30, "scope": "test"},
    "baseline_compare": {"gamma": 0.1},
    "roc": {},
}


def _fixture(spec: ExperimentSpec, seed: int):
    if spec.fixture_dir is not None:
        return load_fixture(spec.fixture_dir)
    return default_fixture(seed)


def _engine(spec: ExperimentSpec, seed: int) -> EngineConfig:
    return EngineConfig(**{**spec.engine, "seed": seed})


def _run_stream(model, records) -> MetricsReport:
    return metrics(model.ingest_many(records), records)


def _rng(seed: int, cond: int, rep: int) -> np.random.Generator:
    return np.random.default_rng([seed, cond, rep])


def _summary(rows: list[MetricsReport]) -> dict:
    out = {}
    for k in METRIC_KEYS:
        vals = np.array([r.values()[k] for r in rows])
        out[k] = {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}
    out["runs"] = len(rows)
    return out


def _map(fn: Callable, tasks: list, workers: int) -> list:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _stream_task(task):
    kind, model_or_records, config, records = task
    if kind == "gem":
        return _run_stream(model_or_records.copy(), records)
    if kind == "gem_train":
        return _run_stream(bootstrap(model_or_records, config), records)
    return _run_stream(MatrixImputationBaseline(model_or_records, config), records)


def _training_ratio(spec, p):
    conditions = {}
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        n = len(fx.train)
        for ratio in p["ratios"]:
            prefix = fx.train[:int(round(ratio * n))]
            conditions.setdefault(f"ratio={ratio}", []).append(
                _run_stream(bootstrap(prefix, cfg), fx.test))
    return conditions


def _update_ratio(spec, p):
    conditions = {}
    n_chunks = int(p["chunks"])
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        base = bootstrap(fx.train, cfg)
        for mode, flag in (("update", True), ("frozen", False)):
            model = base.copy()
            model.config = model.config.replace(online_update=flag)
            results = model.ingest_many(fx.test)
            n = len(fx.test)
            for c in range(n_chunks):
                sl = slice(n * c // n_chunks, n * (c + 1) // n_chunks)
                conditions.setdefault(f"{mode} chunk={c + 1}", []).append(
                    metrics(results[sl], fx.test[sl]))
    return conditions


def _mac_removal(spec, p, split):
    conditions = {}
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        base = bootstrap(fx.train, cfg) if split == "test" else None
        for ci, ratio in enumerate(p["ratios"]):
            tasks = []
            for rep in range(spec.repeats):
                rng = _rng(seed, ci, rep)
                if split == "test":
                    macs = choose_macs(fx.test, ratio, rng)
                    stream = remove_macs(fx.test, macs)
                    tasks.append(("gem", base, cfg, stream))
                    tasks.append(("ablation", fx.train, cfg, stream))
                else:
                    macs = choose_macs(fx.train, ratio, rng)
                    train = remove_macs(fx.train, macs)
                    tasks.append(("gem_train", train, cfg, fx.test))
                    tasks.append(("ablation", train, cfg, fx.test))
            rows = _map(_stream_task, tasks, spec.workers)
            conditions.setdefault(f"gem ratio={ratio}", []).extend(rows[0::2])
            conditions.setdefault(f"ablation ratio={ratio}", []).extend(rows[1::2])
    return conditions


def markov_split(train, test, p: float, q: float, period: int, rng):
    """Mask ``train`` followed by ``test`` with one ON-OFF chain per MAC.

    The chains run on a single clock across both sets, so an access point
    that is OFF at the end of the bootstrap walk is still OFF when the test
    stream starts. Returns the masked ``(train, test)`` pair.
    """
    macs = sorted({m for r in list(train) + list(test) for m, _ in r.readings})
    chains = {m: MarkovOnOff(p, q, period) for m in macs}
    kept = apply_markov_onoff(list(train) + list(test), chains, rng)
    ids = {r.id for r in train}
    return [r for r in kept if r.id in ids], [r for r in kept if r.id not in ids]


def _markov_task(task):
    model, train, test, config, p, q, period, scope, seed_tuple = task
    rng = np.random.default_rng(list(seed_tuple))
    if scope == "both":
        train, stream = markov_split(train, test, p, q, period, rng)
        return _run_stream(bootstrap(train, config), stream)
    chains = {m: MarkovOnOff(p, q, period) for m in sorted({m for r in test for m, _ in r.readings})}
    stream = apply_markov_onoff(test, chains, rng)
    return _run_stream(model.copy(), stream)


def _markov_sweep(spec, p):
    conditions = {}
    period = int(p["period"])
    scope = p.get("scope", "test")
    if scope not in ("test", "both"):
        raise ValueError(f"markov scope must be 'test' or 'both', got {scope!r}")
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        base = bootstrap(fx.train, cfg) if scope == "test" else None
        tasks, keys = [], []
        for pi, pv in enumerate(p["p"]):
            for qi, qv in enumerate(p["q"]):
                for rep in range(spec.repeats):
                    tasks.append((base, fx.train, fx.test, cfg, pv, qv, period, scope,
                                  (seed, pi * 100 + qi, rep)))
                    keys.append(f"p={pv} q={qv}")
        for key, row in zip(keys, _map(_markov_task, tasks, spec.workers)):
            conditions.setdefault(key, []).append(row)
    return conditions


def _baseline_compare(spec, p):
    conditions = {}
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        gem = bootstrap(fx.train, cfg)
        conditions.setdefault("contamination", []).append(
            metrics(contamination_verdicts(gem, fx.test, p["gamma"]), fx.test))
        conditions.setdefault("gem", []).append(_run_stream(gem.copy(), fx.test))
        conditions.setdefault("ablation", []).append(
            _run_stream(MatrixImputationBaseline(fx.train, cfg), fx.test))
    return conditions


def roc_snapshot(model: GemModel, records: Sequence[SignalRecord]):
    """Enhanced and normalised scores of ``records`` at a fixed model state."""
    frozen = model.copy()
    frozen.config = frozen.config.replace(online_update=False)
    enhanced, normalized = [], []
    for res in frozen.ingest_many(records):
        sc = res.verdict.score if res.verdict is not None else SENTINEL
        enhanced.append(sc.enhanced)
        normalized.append(sc.normalized)
    labels = [r.label for r in records]
    return roc(enhanced, labels), roc(normalized, labels)


def _roc(spec, p):
    curves = {}
    for seed in spec.seeds:
        fx, cfg = _fixture(spec, seed), _engine(spec, seed)
        curves[seed] = roc_snapshot(bootstrap(fx.train, cfg), fx.test)
    return curves


def format_table(report: dict) -> str:
    """Aligned plain-text table of condition means (min/max in brackets)."""
    header = ["condition"] + list(METRIC_KEYS)
    rows = [header]
    for cond, summ in report["conditions"].items():
        rows.append([cond] + [f"{summ[k]['mean']:.4f} [{summ[k]['min']:.3f},{summ[k]['max']:.3f}]"
                              for k in METRIC_KEYS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_experiment(spec: ExperimentSpec, out_dir=None) -> dict:
    """Run a protocol and return its report.

    With ``out_dir`` set, ``<protocol>.json`` and ``<protocol>.txt`` are
    written there (plus ``roc_seed<k>_{enhanced,original}.csv`` for the
    ROC protocol).
    """
    p = spec.merged_params()
    report = {"spec": spec.to_dict()}
    extra_files = {}
    if spec.protocol == "roc":
        curves = _roc(spec, p)
        report["conditions"] = {}
        report["auc"] = {}
        for seed, (enh, orig) in curves.items():
            report["auc"][str(seed)] = {"enhanced": enh.auc, "original": orig.auc}
            extra_files[f"roc_seed{seed}_enhanced.csv"] = enh.to_csv()
            extra_files[f"roc_seed{seed}_original.csv"] = orig.to_csv()
    else:
        runner = {
            "training_ratio": _training_ratio,
            "update_ratio": _update_ratio,
            "mac_removal_train": lambda s, q: _mac_removal(s, q, "train"),
            "mac_removal_test": lambda s, q: _mac_removal(s, q, "test"),
            "markov_sweep": _markov_sweep,
            "baseline_compare": _baseline_compare,
        }[spec.protocol]
        report["conditions"] = {k: _summary(v) for k, v in runner(spec, p).items()}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{spec.protocol}.json"), "w", encoding="utf-8") as fh:
            fh.write(report_json(report))
        with open(os.path.join(out_dir, f"{spec.protocol}.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_table(report) if report["conditions"] else _auc_table(report))
        for name, text in extra_files.items():
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(text)
    return report


def _auc_table(report: dict) -> str:
    lines = ["seed  auc_enhanced  auc_original"]
    for seed, v in report["auc"].items():
        lines.append(f"{seed:>4}  {v['enhanced']:12.6f}  {v['original']:12.6f}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
