"""Per-chunk F-scores with and without online detector updates.

The test stream is cut into ten chunks. The updating model absorbs every
confidently-inside record as it goes; the frozen copy never changes.

Run with ``python demos/online_update.py [seed]``.
"""

import sys

from gemfence import EngineConfig, bootstrap
from gemfence.evalkit import metrics
from gemfence.rfsim import default_fixture


def main(seed: int = 0, n_chunks: int = 10) -> None:
    fx = default_fixture(seed)
    base = bootstrap(fx.train, EngineConfig(seed=seed))
    runs = {}
    for mode, flag in (("update", True), ("frozen", False)):
        model = base.copy()
        model.config = model.config.replace(online_update=flag)
        runs[mode] = model.ingest_many(fx.test)
        print(f"{mode}: detector holds {model.detector.n_members} members after the stream")
    n = len(fx.test)
    print(f"{'chunk':>5}  {'F_out update':>12}  {'F_out frozen':>12}  {'F_in update':>11}")
    for c in range(n_chunks):
        sl = slice(n * c // n_chunks, n * (c + 1) // n_chunks)
        up = metrics(runs["update"][sl], fx.test[sl])
        fr = metrics(runs["frozen"][sl], fx.test[sl])
        print(f"{c + 1:>5}  {up.F_out:12.3f}  {fr.F_out:12.3f}  {up.F_in:11.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
