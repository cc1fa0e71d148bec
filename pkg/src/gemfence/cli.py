"""Command-line entry point: ``gemfence {simulate,train,infer,eval,bench}``.

Settings resolve as command-line flags over a JSON ``--config`` file over
the built-in defaults. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 model-file error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .bisage import infer_embedding
from .engine import EngineConfig, GemModel, _node_rng, bootstrap
from .errors import (GemError, InvalidPolygon, InvalidSpec, MissingFixture, ModelFileError,
                     RecordError, RecordParseError, TooFewRecords, UnreachableRegion)
from .evalkit import PROTOCOLS, ExperimentSpec, format_table, run_experiment
from .graph import read_records, write_records
from .rfsim import EnvironmentSpec, default_fixture

log = logging.getLogger("gemfence")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

# flag name -> EngineConfig field
HYPER_FLAGS = {
    "d": ("d", int), "K": ("K", int), "n_samples": ("n_samples", int), "offset": ("offset", float),
    "temperature": ("T", float), "tau_u": ("tau_u", float), "tau_l": ("tau_l", float),
    "bins": ("bins", int), "lr": ("learning_rate", float), "epochs": ("epochs", int),
    "batch_update_size": ("batch_update_size", int),
}


class ConfigError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", default=None, help="JSON file with default settings")
    p.add_argument("--strict", action="store_true", help="fail on malformed input lines")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_hyper(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model hyperparameters")
    for flag, (_, typ) in HYPER_FLAGS.items():
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gemfence", description="WiFi geofencing with graph embeddings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a labelled synthetic fixture")
    _add_common(p)
    p.add_argument("--create", action="store_true", help="create the output directory")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test-in", type=int, default=None)
    p.add_argument("--n-test-out", type=int, default=None)

    p = sub.add_parser("train", help="bootstrap a model from in-premises records")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--records", required=True, help="training records (JSON Lines)")
    p.add_argument("--losses", default=None, help="loss trajectory file (default <out>.losses.jsonl)")

    p = sub.add_parser("infer", help="classify a record stream")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--update", action="store_true", help="absorb confident in-premises records")
    p.add_argument("--save-model", default=None, help="write the updated model here")
    p.add_argument("--latency", action="store_true", help="include per-record latency")

    p = sub.add_parser("eval", help="run an evaluation protocol")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--protocol", choices=PROTOCOLS, default="baseline_compare")
    p.add_argument("--fixture", default=None, help="directory with train.jsonl and test.jsonl")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("bench", help="time inference, detection and update across d")
    _add_common(p)
    p.add_argument("--dims", type=int, nargs="+", default=[16, 32, 64, 128])
    p.add_argument("--bench-epochs", type=int, default=5,
                   help="training epochs per model; timings do not depend on training quality")
    p.add_argument("--n-records", type=int, default=200)
    return ap


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def engine_config(args, file_cfg: dict) -> EngineConfig:
    """Resolve flags > config file > defaults into an :class:`EngineConfig`."""
    known = {f.name for f in fields(EngineConfig)}
    values = {k: v for k, v in file_cfg.get("engine", {}).items()}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown engine settings: {sorted(unknown)}")
    for flag, (name, _) in HYPER_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    seed = args.seed if args.seed is not None else file_cfg.get("seed", values.get("seed", 0))
    values["seed"] = seed
    try:
        return EngineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _seed(args, file_cfg) -> int:
    return args.seed if args.seed is not None else int(file_cfg.get("seed", 0))


def _require_out(args, what: str) -> str:
    if args.out is None:
        raise ConfigError(f"--out is required for {what}")
    return args.out


def _check_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"output directory does not exist: {parent}")


def cmd_simulate(args, file_cfg) -> int:
    out = _require_out(args, "simulate")
    if not os.path.isdir(out):
        if not args.create:
            raise ConfigError(f"output directory {out} does not exist (use --create)")
        os.makedirs(out)
    sim = file_cfg.get("simulate", {})
    env_spec = EnvironmentSpec.from_dict(sim.get("environment", {}))
    counts = {k: getattr(args, k) if getattr(args, k) is not None else sim.get(k, d)
              for k, d in (("n_train", 200), ("n_test_in", 500), ("n_test_out", 500))}
    fx = default_fixture(_seed(args, file_cfg), spec=env_spec, **counts)
    write_records(os.path.join(out, "train.jsonl"), fx.train)
    write_records(os.path.join(out, "test.jsonl"), fx.test)
    with open(os.path.join(out, "environment.json"), "w", encoding="utf-8") as fh:
        json.dump({"spec": env_spec.to_dict(), "environment": fx.env.to_dict()}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {len(fx.train)} training and {len(fx.test)} test records to {out}")
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    out = _require_out(args, "train")
    _check_parent(out)
    config = engine_config(args, file_cfg)
    records = read_records(args.records, strict=args.strict)
    model = bootstrap(records, config)
    model.save(out)
    losses = args.losses or out + ".losses.jsonl"
    with open(losses, "w", encoding="utf-8") as fh:
        for epoch, value in enumerate(model.losses, start=1):
            fh.write(json.dumps({"epoch": epoch, "mean_loss": value}) + "\n")
    print(f"trained on {len(records)} records, {config.epochs} epochs; model written to {out}")
    return EXIT_OK


def cmd_infer(args, file_cfg) -> int:
    if not os.path.isfile(args.model):
        raise ModelFileError(f"model file not found: {args.model}")
    model = GemModel.load(args.model)
    model.config = model.config.replace(online_update=bool(args.update))
    records = read_records(args.records, strict=args.strict)
    results = model.ingest_many(records)
    if args.update:
        model.flush()
    lines = [json.dumps(r.to_json(with_latency=args.latency), sort_keys=True) for r in results]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        _check_parent(args.out)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.save_model:
        model.save(args.save_model)
    return EXIT_OK


def cmd_eval(args, file_cfg) -> int:
    ev = file_cfg.get("eval", {})
    config = engine_config(args, file_cfg)
    engine = {f.name: getattr(config, f.name) for f in fields(EngineConfig) if f.name != "seed"}
    seeds = args.seeds or ev.get("seeds") or [config.seed]
    repeats = args.repeats if args.repeats is not None else ev.get("repeats", 30)
    if args.fixture is not None and not os.path.isdir(args.fixture):
        raise MissingFixture(f"fixture directory not found: {args.fixture}")
    spec = ExperimentSpec(args.protocol, ev.get("params", {}), repeats, tuple(seeds),
                          args.fixture, engine, args.workers)
    report = run_experiment(spec, out_dir=args.out)
    if report["conditions"]:
        sys.stdout.write(format_table(report))
    else:
        for seed, v in report["auc"].items():
            print(f"seed {seed}: AUC enhanced {v['enhanced']:.4f}, original {v['original']:.4f}")
    return EXIT_OK


def _median_us(fn, n):
    times = []
    for i in range(n):
        t0 = time.perf_counter_ns()
        fn(i)
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)) / 1000.0


def bench_table(dims, seed=0, epochs=5, n_records=200) -> list[dict]:
    """Median per-record stage timings (microseconds) for each dimension."""
    fx = default_fixture(seed, n_test_in=n_records // 2, n_test_out=n_records - n_records // 2)
    rows = []
    for d in dims:
        model = bootstrap(fx.train, EngineConfig(d=d, epochs=epochs, seed=seed))
        stream = model.copy()
        stream.config = stream.config.replace(online_update=False)
        nodes, embs = [], []

        def embed(i):
            rec = fx.test[i]
            first = stream.graph.num_nodes
            u = stream.graph.add_record(rec)
            stream._grow_tables(first)
            try:
                pair = infer_embedding(stream.graph, stream.params, stream.table0, u,
                                       _node_rng(seed, u, 1))
                embs.append(pair.h)
            except GemError:
                embs.append(np.zeros(d))
            nodes.append(u)

        t_embed = _median_us(embed, len(fx.test))
        det = stream.detector
        t_detect = _median_us(lambda i: det.classify(embs[i]), len(embs))
        t_update = _median_us(lambda i: det.absorb(embs[i]), min(50, len(embs)))
        rows.append({"d": d, "embed_us": t_embed, "detect_us": t_detect, "update_us": t_update,
                     "total_ms": (t_embed + t_detect + t_update) / 1000.0})
    return rows


def format_bench(rows) -> str:
    lines = [f"{'d':>5}  {'embed_us':>10}  {'detect_us':>10}  {'update_us':>10}  {'total_ms':>9}"]
    for r in rows:
        lines.append(f"{r['d']:>5}  {r['embed_us']:10.1f}  {r['detect_us']:10.1f}  "
                     f"{r['update_us']:10.1f}  {r['total_ms']:9.3f}")
    return "\n".join(lines) + "\n"


def cmd_bench(args, file_cfg) -> int:
    rows = bench_table(args.dims, _seed(args, file_cfg), args.bench_epochs, args.n_records)
    text = format_bench(rows)
    sys.stdout.write(text)
    if args.out:
        _check_parent(args.out)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = _load_config(args.config)
        return COMMANDS[args.command](args, file_cfg)
    except (ConfigError, InvalidSpec, InvalidPolygon) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFileError as exc:
        print(f"model error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (RecordParseError, RecordError, MissingFixture, TooFewRecords, UnreachableRegion,
            GemError, FileNotFoundError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
