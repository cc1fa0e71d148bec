"""Synthetic RF environments and labelled record streams.

RSS follows a log-distance path-loss model with Gaussian shadow fading and a
fixed attenuation for every fence wall the direct path crosses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidPolygon, InvalidSpec, UnreachableRegion
from .graph import SignalRecord

log = logging.getLogger(__name__)

SAMPLE_PERIOD_MS = 1000


# -- polygon helpers ----------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper intersection test for segments p1p2 and q1q2."""
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


def is_simple(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a1, a2, poly[j], poly[(j + 1) % n]):
                return False
    return True


def point_in_polygon(points, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; ``points`` has shape (n, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    x2, y2 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    straddle = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    hits = straddle & (x < x_cross)
    return (hits.sum(axis=1) % 2) == 1


def wall_crossings(a, b, poly: np.ndarray) -> int:
    """Number of fence edges crossed by the straight segment ``a``-``b``."""
    n = len(poly)
    return sum(_segments_cross(a, b, poly[i], poly[(i + 1) % n]) for i in range(n))


# -- environment ----------------------------------------------------------

@dataclass
class EnvironmentSpec:
    fence: list = field(default_factory=lambda: [[0, 0], [10, 0], [10, 10], [0, 10]])
    n_inside: int = 12
    n_outside: int = 8
    outside_margin: float = 15.0
    tx_power_dbm: float = -33.0
    pl0_db: float = 40.0
    d0_m: float = 1.0
    exponent: float = 2.5
    shadowing_db: float = 3.0
    wall_db: float = 10.0
    floor_dbm: float = -95.0
    bands: tuple = ("2.4GHz",)

    @classmethod
    def from_dict(cls, obj: dict) -> "EnvironmentSpec":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown environment keys: {sorted(unknown)}")
        spec = cls(**obj)
        spec.bands = tuple(spec.bands)
        return spec

    @classmethod
    def load(cls, path) -> "EnvironmentSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bands"] = list(self.bands)
        return out


@dataclass
class AccessPoint:
    mac: str
    position: np.ndarray
    tx_power_dbm: float
    band: str
    inside: bool


@dataclass
class Environment:
    fence: np.ndarray
    aps: list[AccessPoint]
    bbox: tuple[float, float, float, float]
    pl0_db: float
    d0_m: float
    exponent: float
    shadowing_db: float
    wall_db: float
    floor_dbm: float

    def __post_init__(self):
        if not 1.5 <= self.exponent <= 6:
            raise InvalidSpec(f"path-loss exponent {self.exponent} outside [1.5, 6]")
        if self.shadowing_db < 0:
            raise InvalidSpec("shadowing std must be >= 0")

    @property
    def macs(self) -> list[str]:
        return [ap.mac for ap in self.aps]

    def contains(self, points) -> np.ndarray:
        return point_in_polygon(points, self.fence)

    def to_dict(self) -> dict:
        return {
            "fence": self.fence.tolist(), "bbox": list(self.bbox),
            "aps": [{"mac": a.mac, "position": a.position.tolist(), "tx_power_dbm": a.tx_power_dbm,
                     "band": a.band, "inside": a.inside} for a in self.aps],
            "pl0_db": self.pl0_db, "d0_m": self.d0_m, "exponent": self.exponent,
            "shadowing_db": self.shadowing_db, "wall_db": self.wall_db, "floor_dbm": self.floor_dbm,
        }


def _check_polygon(fence) -> np.ndarray:
    poly = np.asarray(fence, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise InvalidPolygon("fence needs at least three 2-D vertices")
    if abs(polygon_area(poly)) < 1e-9:
        raise InvalidPolygon("fence polygon has zero area")
    if not is_simple(poly):
        raise InvalidPolygon("fence polygon self-intersects")
    return poly


def _uniform_in(region_test, bbox, rng, tries=10000) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    for _ in range(tries):
        p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if region_test(p):
            return p
    raise UnreachableRegion("could not place a point in the requested region")


def generate_environment(spec: EnvironmentSpec, rng) -> Environment:
    """Place APs uniformly inside the fence and in the surrounding box."""
    rng = np.random.default_rng(rng)
    poly = _check_polygon(spec.fence)
    if spec.n_inside + spec.n_outside < 1:
        raise InvalidSpec("need at least one access point")
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    m = spec.outside_margin
    bbox = (lo[0] - m, lo[1] - m, hi[0] + m, hi[1] + m)
    inner = (lo[0], lo[1], hi[0], hi[1])
    aps = []
    for k in range(spec.n_inside + spec.n_outside):
        inside = k < spec.n_inside
        if inside:
            pos = _uniform_in(lambda p: point_in_polygon(p, poly)[0], inner, rng)
        else:
            pos = _uniform_in(lambda p: not point_in_polygon(p, poly)[0], bbox, rng)
        band = spec.bands[k % len(spec.bands)]
        aps.append(AccessPoint(f"02:00:00:00:{k // 256:02x}:{k % 256:02x}", pos,
                               float(spec.tx_power_dbm), band, inside))
    return Environment(poly, aps, bbox, spec.pl0_db, spec.d0_m, spec.exponent,
                       spec.shadowing_db, spec.wall_db, spec.floor_dbm)


def mean_rss(env: Environment, ap_index: int, position) -> float:
    """Deterministic part of the RSS model (no fading)."""
    ap = env.aps[ap_index]
    position = np.asarray(position, dtype=np.float64)
    dist = float(np.linalg.norm(position - ap.position))
    pl = env.pl0_db + 10.0 * env.exponent * np.log10(max(dist, env.d0_m) / env.d0_m)
    walls = wall_crossings(ap.position, position, env.fence) if env.wall_db else 0
    return ap.tx_power_dbm - pl - env.wall_db * walls


def synthesize_reading(env: Environment, ap_index: int, position, rng) -> Optional[float]:
    """One RSS draw in dBm, or ``None`` when below the sensing floor."""
    rss = mean_rss(env, ap_index, position)
    if env.shadowing_db > 0:
        rss += rng.normal(0.0, env.shadowing_db)
    if rss < env.floor_dbm:
        return None
    return float(rss)


# -- trajectories -----------------------------------------------------------

def _perimeter_path(poly: np.ndarray, margin: float) -> np.ndarray:
    centroid = poly.mean(axis=0)
    span = min(np.ptp(poly[:, 0]), np.ptp(poly[:, 1]))
    scale = max(0.0, 1.0 - 2.0 * margin / span)
    return centroid + (poly - centroid) * scale


def _walk_polyline(path: np.ndarray, n: int, step: float, offset: float) -> np.ndarray:
    closed = np.vstack([path, path[:1]])
    seg = np.diff(closed, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s = (offset + step * np.arange(n)) % total
    k = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    return closed[k] + seg[k] * frac[:, None]


def _waypoint_trajectory(env: Environment, inside: bool, n: int, step: float, rng) -> np.ndarray:
    poly = env.fence
    if inside:
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        box = (lo[0], lo[1], hi[0], hi[1])
    else:
        box = env.bbox

    def ok(p):
        return bool(point_in_polygon(p, poly)[0]) == inside

    def clear(a, b):
        # both endpoints in region and the segment never crosses the fence
        return wall_crossings(a, b, poly) == 0

    pos = _uniform_in(ok, box, rng)
    target = pos
    out = np.empty((n, 2))
    for t in range(n):
        out[t] = pos
        remaining = step
        while remaining > 1e-12:
            gap = target - pos
            dist = float(np.linalg.norm(gap))
            if dist <= remaining:
                pos = target
                remaining -= dist
                for _ in range(1000):
                    cand = _uniform_in(ok, box, rng)
                    if clear(pos, cand):
                        target = cand
                        break
                else:
                    raise UnreachableRegion("no reachable waypoint from current position")
            else:
                pos = pos + gap * (remaining / dist)
                remaining = 0.0
    return out


def _trajectory(env: Environment, region: str, n: int, speed: float, seed: int,
                margin: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if region == "perimeter":
        path = _perimeter_path(env.fence, margin)
        if abs(polygon_area(path)) < 1e-9:
            raise UnreachableRegion("fence too small for the perimeter margin")
        total = float(np.sum(np.linalg.norm(np.diff(np.vstack([path, path[:1]]), axis=0), axis=1)))
        return _walk_polyline(path, n, speed, rng.uniform(0, total))
    return _waypoint_trajectory(env, region == "inside", n, speed, rng)


def simulate_walk(env: Environment, region: str, n_samples: int, speed: float = 0.8,
                  rng=None, id_prefix: str = "r", start_ms: int = 0,
                  margin: float = 1.0) -> list[SignalRecord]:
    """Walk through ``region`` and return ``n_samples`` records taken at 1 Hz.

    ``region`` is ``"inside"``, ``"outside"`` or ``"perimeter"`` (the inner
    perimeter, ``margin`` metres from the fence). Scans that hear no access
    point produce no record; the walk simply continues, so timestamps may
    skip. Labels come from point-in-polygon membership of the true position.
    """
    rng = np.random.default_rng(rng)
    if region not in ("inside", "outside", "perimeter"):
        raise ValueError(f"unknown region {region!r}")
    if n_samples < 0 or speed <= 0:
        raise ValueError("n_samples must be >= 0 and speed > 0")
    traj_seed = int(rng.integers(2 ** 63))
    records: list[SignalRecord] = []
    positions = np.zeros((0, 2))
    t = 0
    silent = 0
    length = n_samples
    while len(records) < n_samples:
        if t >= len(positions):
            if length > 50 * max(n_samples, 1):
                raise UnreachableRegion(f"region {region!r} is mostly out of radio range")
            # trajectories are prefix-stable, so regrowing keeps earlier samples
            positions = _trajectory(env, region, length, speed, traj_seed, margin)
            length *= 2
            continue
        p = positions[t]
        readings = []
        for a, ap in enumerate(env.aps):
            rss = synthesize_reading(env, a, p, rng)
            if rss is not None:
                readings.append((ap.mac, round(rss, 2)))
        if readings:
            label = "in" if env.contains(p[None])[0] else "out"
            records.append(SignalRecord(f"{id_prefix}{t:06d}", start_ms + t * SAMPLE_PERIOD_MS,
                                        readings, label, tuple(p)))
        else:
            silent += 1
        t += 1
    if silent:
        log.debug("skipped %d scans that heard no access point", silent)
    return records


# -- AP dynamics ------------------------------------------------------------

@dataclass(frozen=True)
class MarkovOnOff:
    """Two-state chain: ``p`` = Pr(ON -> OFF), ``q`` = Pr(OFF -> ON) per period."""

    p: float
    q: float
    period: int = 30

    def __post_init__(self):
        if not (0 <= self.p <= 1 and 0 <= self.q <= 1):
            raise ValueError("p and q must lie in [0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")

    def states(self, n_periods: int, rng, start_on: bool = True) -> np.ndarray:
        on = np.empty(n_periods, dtype=bool)
        state = start_on
        u = rng.random(n_periods)
        for k in range(n_periods):
            on[k] = state
            state = (u[k] >= self.p) if state else (u[k] < self.q)
        return on


def apply_markov_onoff(stream: Sequence[SignalRecord], chains, rng,
                       start_on: bool = True) -> list[SignalRecord]:
    """Remove readings of APs while their ON-OFF chain is OFF.

    ``chains`` maps MAC -> :class:`MarkovOnOff`; MACs without a chain stay
    ON. Records left without readings are dropped.
    """
    rng = np.random.default_rng(rng)
    n = len(stream)
    masks = {}
    for mac in sorted(chains):
        ch = chains[mac]
        n_periods = -(-n // ch.period) if n else 0
        masks[mac] = np.repeat(ch.states(n_periods, rng, start_on), ch.period)[:n]
    out = []
    dropped = 0
    for t, rec in enumerate(stream):
        kept = [(m, r) for m, r in rec.readings if m not in masks or masks[m][t]]
        if not kept:
            dropped += 1
            continue
        out.append(SignalRecord(rec.id, rec.timestamp, kept, rec.label, rec.position))
    if dropped:
        log.warning("dropped %d records emptied by AP OFF periods", dropped)
    return out


# -- default fixture -------------------------------------------------------

@dataclass
class Fixture:
    env: Environment
    train: list[SignalRecord]
    test: list[SignalRecord]


def default_fixture(seed: int = 0, n_train: int = 200, n_test_in: int = 500,
                    n_test_out: int = 500, spec: Optional[EnvironmentSpec] = None,
                    speed: float = 0.8) -> Fixture:
    """Perimeter bootstrap walk plus an interleaved in/out test stream.

    The test stream alternates inside and outside excursions in blocks, as
    if the user left and re-entered the premises.
    """
    ss = np.random.SeedSequence(seed)
    env_rng, train_rng, in_rng, out_rng, mix_rng = [np.random.default_rng(s) for s in ss.spawn(5)]
    env = generate_environment(spec or EnvironmentSpec(), env_rng)
    train = simulate_walk(env, "perimeter", n_train, speed, train_rng, id_prefix="train-")
    t0 = n_train * SAMPLE_PERIOD_MS
    test_in = simulate_walk(env, "inside", n_test_in, speed, in_rng, id_prefix="in-")
    test_out = simulate_walk(env, "outside", n_test_out, speed, out_rng, id_prefix="out-")
    test = interleave_blocks(test_in, test_out, n_chunks=10, rng=mix_rng)
    for k, rec in enumerate(test):
        rec.timestamp = t0 + k * SAMPLE_PERIOD_MS
    return Fixture(env, train, test)


def interleave_blocks(a, b, n_chunks, rng):
    """Concatenate ``n_chunks`` chunks, each one block of ``a`` and one of ``b``.

    Block order inside a chunk is random, so every tenth of the stream holds
    the same share of each class.
    """
    out = []
    for k in range(n_chunks):
        pa = a[len(a) * k // n_chunks: len(a) * (k + 1) // n_chunks]
        pb = b[len(b) * k // n_chunks: len(b) * (k + 1) // n_chunks]
        out.extend(pa + pb if rng.random() < 0.5 else pb + pa)
    return out
