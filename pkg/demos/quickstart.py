"""Walk through one geofencing run on a synthetic house.

Simulates a 10 m x 10 m premises with twenty access points, bootstraps a
model from a 200-sample walk along the inner perimeter, then streams 1000
test records (half inside, half outside) through it with online updates.

Run with ``python demos/quickstart.py [seed]``.
"""

import sys
import time

import numpy as np

from gemfence import EngineConfig, bootstrap
from gemfence.evalkit import MatrixImputationBaseline, metrics
from gemfence.rfsim import default_fixture


def main(seed: int = 0) -> None:
    fx = default_fixture(seed)
    n_macs = len({m for r in fx.train + fx.test for m, _ in r.readings})
    per_rec = np.mean([len(r.readings) for r in fx.train])
    print(f"fixture: {len(fx.train)} bootstrap records, {len(fx.test)} test records, "
          f"{n_macs} MACs, {per_rec:.1f} readings per bootstrap record")

    t0 = time.perf_counter()
    model = bootstrap(fx.train, EngineConfig(seed=seed))
    print(f"bootstrap: {time.perf_counter() - t0:.1f} s, "
          f"loss {model.losses[0]:.3f} -> {model.losses[-1]:.3f}")

    results = model.ingest_many(fx.test)
    rep = metrics(results, fx.test)
    n_up = sum(r.updated for r in results)
    lat = np.median([r.latency_us for r in results]) / 1000
    print(f"GEM       F_in {rep.F_in:.3f}  F_out {rep.F_out:.3f}  "
          f"({n_up} records absorbed, median ingest {lat:.2f} ms)")

    base = MatrixImputationBaseline(fx.train, EngineConfig(seed=seed))
    brep = metrics(base.ingest_many(fx.test), fx.test)
    print(f"ablation  F_in {brep.F_in:.3f}  F_out {brep.F_out:.3f}  (padded RSS matrix)")

    # a few verdicts, in stream order
    for r, rec in list(zip(results, fx.test))[::200]:
        print(f"  {rec.id:>12}  truth={rec.label:<3}  decision={r.decision:<3}  "
              f"s_t={r.verdict.score.enhanced:.3g}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
