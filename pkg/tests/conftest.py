import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gemfence.graph import BipartiteGraph, SignalRecord

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def rec(rid, *readings, label=None, ts=0):
    return SignalRecord(rid, ts, list(readings), label)


@pytest.fixture
def small_graph():
    """Three records over four MACs, every node with degree >= 1."""
    g = BipartiteGraph()
    g.add_record(rec("r0", ("a", -40), ("b", -60)))
    g.add_record(rec("r1", ("b", -50), ("c", -70), ("d", -80)))
    g.add_record(rec("r2", ("a", -55), ("d", -65)))
    return g


def random_graph(rng, n_records=4, n_macs=4):
    """Random connected-ish bipartite graph with every record holding >= 1 reading."""
    g = BipartiteGraph()
    macs = [f"m{j}" for j in range(n_macs)]
    for i in range(n_records):
        k = int(rng.integers(1, n_macs + 1))
        chosen = rng.choice(n_macs, size=k, replace=False)
        g.add_record(rec(f"r{i}", *[(macs[j], float(rng.uniform(-90, -30))) for j in chosen]))
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
