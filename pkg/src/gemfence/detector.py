"""Histogram-based one-class detector with temperature-rescaled scores.

Each embedding dimension gets its own equal-width histogram over the member
set. The raw outlier score of a vector is the sum over dimensions of
``log(1 / (bin_mass + eps))``. Raw scores are min-max normalised against the
members, then squashed with ``sigmoid((2 * Hbar - 1) / T)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import (CorruptModel, EmptyTrainingSet, GammaOutOfRange, NonPositiveT,
                     NotConfident)

DEFAULT_BINS = 20
DEFAULT_T = 0.06
DEFAULT_TAU_U = 0.005
DEFAULT_TAU_L = 0.001
DEFAULT_EPS = 1e-6


class Decision(str, Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class OutlierScore:
    raw: float
    normalized: float
    enhanced: float


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    score: OutlierScore
    confident_in: bool


def enhanced_score(h_bar, T: float):
    """Two-state Boltzmann weight of the outlier state; equals sigmoid((2h-1)/T)."""
    if not T > 0:
        raise NonPositiveT(f"T must be positive, got {T}")
    return expit((2.0 * np.asarray(h_bar, dtype=np.float64) - 1.0) / T)


def _histogram(column: np.ndarray, m: int, eps: float):
    lo, hi = float(column.min()), float(column.max())
    if lo == hi:
        edges = np.array([lo - eps / 2, lo + eps / 2])
        return edges, np.ones(1)
    edges = np.linspace(lo, hi, m + 1)
    counts = np.bincount(_bin_index(edges, column), minlength=m)
    return edges, counts / len(column)


def _bin_index(edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    # half-open bins, top edge closed; out-of-range values land in the edge bins
    n_bins = len(edges) - 1
    return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)


class HistogramDetector:
    """Fitted per-dimension histograms plus thresholds.

    Instances are treated as immutable: :meth:`absorb` returns a new
    detector, so a reader holding a reference never sees a partial update.
    """

    def __init__(self, members, bins=DEFAULT_BINS, T=DEFAULT_T, tau_u=DEFAULT_TAU_U,
                 tau_l=DEFAULT_TAU_L, eps=DEFAULT_EPS):
        members = np.atleast_2d(np.asarray(members, dtype=np.float64))
        if members.size == 0 or members.shape[0] < 1:
            raise EmptyTrainingSet("detector needs at least one member embedding")
        if bins < 1:
            raise ValueError("bins must be >= 1")
        if not T > 0:
            raise NonPositiveT(f"T must be positive, got {T}")
        if not 0 < tau_l < tau_u < 1:
            raise ValueError(f"need 0 < tau_l < tau_u < 1, got {tau_l}, {tau_u}")
        self.members = members
        self.bins = int(bins)
        self.T = float(T)
        self.tau_u = float(tau_u)
        self.tau_l = float(tau_l)
        self.eps = float(eps)
        self.edges: list[np.ndarray] = []
        self.masses: list[np.ndarray] = []
        for j in range(members.shape[1]):
            e, w = _histogram(members[:, j], self.bins, self.eps)
            self.edges.append(e)
            self.masses.append(w)
        scores = self.raw_scores(members)
        self.min_score = float(scores.min())
        self.max_score = float(scores.max())

    @classmethod
    def fit(cls, embeddings, bins=DEFAULT_BINS, **kwargs) -> "HistogramDetector":
        return cls(embeddings, bins=bins, **kwargs)

    @property
    def d(self) -> int:
        return self.members.shape[1]

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    def config(self) -> dict:
        return dict(bins=self.bins, T=self.T, tau_u=self.tau_u, tau_l=self.tau_l, eps=self.eps)

    # -- scoring --------------------------------------------------------
    def bin_masses(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty(X.shape)
        for j, (e, w) in enumerate(zip(self.edges, self.masses)):
            out[:, j] = w[_bin_index(e, X[:, j])]
        return out

    def raw_scores(self, X) -> np.ndarray:
        return -np.log(self.bin_masses(X) + self.eps).sum(axis=1)

    def raw_score(self, h) -> float:
        return float(self.raw_scores(h)[0])

    def normalize(self, H):
        H = np.asarray(H, dtype=np.float64)
        span = self.max_score - self.min_score
        if span == 0:
            return np.where(H <= self.min_score, 0.0, 1.0)
        return np.clip((H - self.min_score) / span, 0.0, 1.0)

    def score(self, h) -> OutlierScore:
        raw = self.raw_score(h)
        nrm = float(self.normalize(raw))
        return OutlierScore(raw, nrm, float(enhanced_score(nrm, self.T)))

    def scores(self, X) -> np.ndarray:
        """Enhanced scores for a batch of vectors."""
        return enhanced_score(self.normalize(self.raw_scores(X)), self.T)

    def decide(self, s_t: float) -> tuple[Decision, bool]:
        out = s_t > self.tau_u
        return (Decision.OUT if out else Decision.IN), (not out and s_t < self.tau_l)

    def classify(self, h) -> Verdict:
        sc = self.score(h)
        decision, confident = self.decide(sc.enhanced)
        return Verdict(decision, sc, confident)

    def baseline_threshold(self, gamma: float) -> float:
        """Contamination-factor threshold on normalised member scores."""
        n = self.n_members
        i_star = int(round(n * gamma)) if 0 < gamma < 1 else 0
        if i_star < 1:
            raise GammaOutOfRange(f"gamma={gamma} with n={n} gives no order statistic")
        ordered = np.sort(self.normalize(self.raw_scores(self.members)))[::-1]
        return float(ordered[i_star - 1])

    # -- updates --------------------------------------------------------
    def absorb(self, h, strict: bool = False) -> "HistogramDetector":
        """Return a detector refitted on the members plus ``h`` (one or many rows)."""
        X = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if strict:
            for row in X:
                if not self.classify(row).confident_in:
                    raise NotConfident("sample is not a confident in-premises embedding")
        return HistogramDetector(np.vstack([self.members, X]), **self.config())

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            **self.config(),
            "n_members": self.n_members,
            "members": self.members.ravel().tolist(),
            "d": self.d,
            "edges": [e.tolist() for e in self.edges],
            "masses": [w.tolist() for w in self.masses],
            "min_score": self.min_score,
            "max_score": self.max_score,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HistogramDetector":
        members = np.asarray(obj["members"], dtype=np.float64).reshape(obj["n_members"], obj["d"])
        det = cls(members, bins=obj["bins"], T=obj["T"], tau_u=obj["tau_u"],
                  tau_l=obj["tau_l"], eps=obj["eps"])
        if det.min_score != obj["min_score"] or det.max_score != obj["max_score"]:
            raise CorruptModel("detector statistics do not match its member set")
        return det
