"""Access points switching on and off, and MACs disappearing.

Each access point follows a two-state ON-OFF chain that can switch every
30 samples; readings from OFF access points vanish from both the bootstrap
walk and the test stream. A second experiment drops a random quarter of the
test MACs altogether.

Run with ``python demos/ap_dynamics.py [seed]``.
"""

import logging
import sys

import numpy as np

from gemfence import EngineConfig, bootstrap
from gemfence.evalkit import (MatrixImputationBaseline, choose_macs, markov_split, metrics,
                              remove_macs)
from gemfence.rfsim import default_fixture

logging.basicConfig(level=logging.ERROR)


def main(seed: int = 0) -> None:
    fx = default_fixture(seed)
    cfg = EngineConfig(seed=seed)
    print("AP ON-OFF dynamics (one run per cell)")
    for p, q in ((0.1, 0.9), (0.5, 0.5), (0.9, 0.9), (0.9, 0.1)):
        train, test = markov_split(fx.train, fx.test, p, q, 30, np.random.default_rng([seed, 7]))
        rep = metrics(bootstrap(train, cfg).ingest_many(test), test)
        print(f"  p={p} q={q}: {len(train)} bootstrap / {len(test)} test records kept, "
              f"F_in {rep.F_in:.3f}  F_out {rep.F_out:.3f}")

    print("removing 25% of the test MACs")
    model = bootstrap(fx.train, cfg)
    stream = remove_macs(fx.test, choose_macs(fx.test, 0.25, np.random.default_rng(seed)))
    for name, m in (("GEM", model.copy()), ("ablation", MatrixImputationBaseline(fx.train, cfg))):
        rep = metrics(m.ingest_many(stream), stream)
        print(f"  {name:<8} F_in {rep.F_in:.3f}  F_out {rep.F_out:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
