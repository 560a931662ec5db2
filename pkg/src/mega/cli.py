"""Command-line experiment driver.

Subcommands: ``run``, ``ablate``, ``check-grad``, ``gen-sbm``, ``show-report``.
Configuration is one JSON document with ``dataset``, ``split`` and ``train``
sections; ``--set section.key=value`` overrides single fields (the value is
parsed as JSON, falling back to a bare string).

Outputs land in ``<out>/<config-hash>/<seed>/report.json`` plus an
aggregate next to the seed directories. ``--out`` defaults to
``$MEGA_OUTPUT_ROOT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from . import gradcheck
from .episodes import SplitConfig, build_task_stream
from .eval_report import AccuracyMatrix, AggregateReport, aggregate, emit_comparison, emit_report
from .graphdata import DatasetError, SbmConfig, generate_sbm, load_dataset, save_dataset
from .io_utils import atomic_dir, dump_json, write_json_atomic
from .model import GraphInputs
from .trainer import StageReport, TrainConfig, TrainingDiverged, run_experiment

log = logging.getLogger("mega")

OUTPUT_ENV = "MEGA_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# (MCTF, SIR, KD) per ablation row
VARIANTS = {
    "Baseline": (False, False, False),
    "a": (True, False, False),
    "b": (False, True, False),
    "c": (False, False, True),
    "d": (True, True, False),
    "e": (True, False, True),
    "f": (False, True, True),
    "g": (True, True, True),
}


class ConfigError(ValueError):
    """Bad configuration; the message names the offending field."""


# --- configuration ---------------------------------------------------------

def _dataclass_section(cls, doc: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    try:
        obj = cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    return obj


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides to a nested dict (copied)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = value
    return doc


def resolve(doc: dict) -> dict:
    """Validate a raw config and fill defaults; returns a canonical dict."""
    unknown = sorted(set(doc) - {"dataset", "split", "train", "seeds"})
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    ds = doc.get("dataset", {"sbm": {}})
    if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("path", "sbm"):
        raise ConfigError('dataset: expected {"path": ...} or {"sbm": {...}}')
    if "sbm" in ds:
        sbm = _dataclass_section(SbmConfig, ds["sbm"] or {}, "dataset.sbm")
        try:
            sbm.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset.sbm: {exc}") from None
        dataset = {"sbm": asdict(sbm)}
    else:
        dataset = {"path": str(ds["path"])}
    split = _dataclass_section(SplitConfig, doc.get("split", {}), "split")
    train_doc = dict(doc.get("train", {}))
    if "hidden" in train_doc:
        train_doc["hidden"] = tuple(train_doc["hidden"])
    train = _dataclass_section(TrainConfig, train_doc, "train")
    try:
        split.validate()
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")
    return {"dataset": dataset, "split": asdict(split), "train": train.to_json(), "seeds": seeds}


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "seeds"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


def load_graph(dataset: dict):
    if "path" in dataset:
        return load_dataset(dataset["path"])
    return generate_sbm(SbmConfig(**dataset["sbm"]))


# --- running ---------------------------------------------------------------

def run_seed(cfg: dict, seed: int) -> dict:
    """One full experiment; the seed drives the split, init, sampling and dropout."""
    ds = load_graph(cfg["dataset"])
    graph = GraphInputs.from_dataset(ds, cfg["train"]["normalization"])
    split = SplitConfig(**{**cfg["split"], "seed": seed})
    stream = build_task_stream(ds, split)
    train = TrainConfig(**{**cfg["train"], "hidden": tuple(cfg["train"]["hidden"]), "seed": seed})
    report = run_experiment(graph, stream, split, train)
    doc = report.to_json()
    doc["stream"] = stream.to_json()
    return doc


def _map(fn, args: list, jobs: int) -> list:
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def execute(cfg: dict, out_root, jobs: int = 1) -> tuple[Path, AggregateReport]:
    """Run every seed and write per-seed reports plus the aggregate.

    The whole ``<config-hash>`` directory is assembled in a temporary
    sibling and renamed into place, so a failure leaves nothing behind.
    """
    docs = _map(run_seed, [(cfg, s) for s in cfg["seeds"]], jobs)
    agg = aggregate([AccuracyMatrix.from_json(d["accuracy"]) for d in docs], config=cfg)
    target = Path(out_root) / config_hash(cfg)
    with atomic_dir(target) as tmp:
        write_json_atomic(tmp / "config.json", cfg)
        for seed, doc in zip(cfg["seeds"], docs):
            write_json_atomic(tmp / str(seed) / "report.json", doc)
        emit_report(agg, "json", tmp / "aggregate.json")
        emit_report(agg, "csv", tmp / "aggregate.csv")
        emit_report(agg, "plot-data", tmp / "plot-data.txt")
    return target, agg


def variant_config(cfg: dict, name: str) -> dict:
    mctf, sir, kd = VARIANTS[name]
    out = json.loads(json.dumps(cfg))
    out["train"].update(use_mctf=mctf, use_sir=sir, use_kd=kd)
    return out


# --- subcommands -------------------------------------------------------------

def _build_config(args) -> dict:
    doc = load_config_file(args.config) if args.config else {}
    doc = apply_overrides(doc, args.set or [])
    if args.seeds:
        try:
            doc["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    cfg = resolve(doc)
    if "path" in cfg["dataset"] and not Path(cfg["dataset"]["path"]).exists():
        raise ConfigError(f"dataset not found: {cfg['dataset']['path']}")
    return cfg


def cmd_run(args) -> int:
    cfg = _build_config(args)
    target, agg = execute(cfg, args.out, args.jobs)
    print(f"wrote {target}")
    print("final accuracy " + emit_cell(agg, -1))
    return EXIT_OK


def emit_cell(agg: AggregateReport, i: int) -> str:
    return f"{100 * agg.mean[i]:.2f}±{100 * agg.std[i]:.2f}"


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    names = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise ConfigError(f"--variants: unknown variant(s) {', '.join(bad)}; choose from {', '.join(VARIANTS)}")
    reports = {}
    for name in names:
        target, agg = execute(variant_config(cfg, name), args.out, args.jobs)
        reports[name] = agg
        mctf, sir, kd = VARIANTS[name]
        print(f"{name:<8s} MCTF={int(mctf)} SIR={int(sir)} KD={int(kd)} final={emit_cell(agg, -1)} -> {target}")
    table_dir = Path(args.out) / f"ablation-{config_hash(cfg)}"
    with atomic_dir(table_dir) as tmp:
        emit_comparison(reports, tmp)
        write_json_atomic(tmp / "variants.json",
                          {n: dict(zip(("mctf", "sir", "kd"), VARIANTS[n])) for n in names})
    print(f"wrote {table_dir}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    results = gradcheck.run_all(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gen_sbm(args) -> int:
    doc = apply_overrides({}, args.set or [])
    sbm = _dataclass_section(SbmConfig, doc, "sbm")
    try:
        sbm.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = generate_sbm(sbm)
    with atomic_dir(args.output) as tmp:
        save_dataset(ds, tmp)
    print(f"wrote {ds.num_nodes} nodes, {len(ds.edges)} edges, {ds.num_classes} classes to {args.output}")
    return EXIT_OK


def cmd_show_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "aggregate.json"
    if not path.exists():
        raise ConfigError(f"report not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "accuracy" in doc:
        rows = StageReport.from_json({k: doc[k] for k in
                                      ("accuracy", "seen_class_counts", "meta_curve", "inc_curves", "config",
                                       "seed")}).accuracy.rows
        agg = aggregate([AccuracyMatrix(rows)])
    else:
        agg = AggregateReport.from_json(doc)
    if args.format == "json":
        sys.stdout.write(dump_json(agg.to_json()))
        return EXIT_OK
    print(f"{'stage':<8s} {'overall':>14s}  (n_runs={agg.n_runs})")
    for i, name in enumerate(agg.stages):
        print(f"{name:<8s} {emit_cell(agg, i):>14s}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mega", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p):
        p.add_argument("--config", help="JSON config file (dataset/split/train/seeds sections)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one field, e.g. train.meta_epochs=60 (repeatable)")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2 (overrides config)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent seeds")
        p.add_argument("--out", default=os.environ.get(OUTPUT_ENV, "runs"),
                       help=f"output root (default: ${OUTPUT_ENV} or ./runs)")

    p = sub.add_parser("run", help="meta-train and evaluate the incremental stream for each seed")
    add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the MCTF/SIR/KD ablation variants")
    add_run_args(p)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check-grad", help="finite-difference checks of autodiff, model, losses, meta-gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("gen-sbm", help="write a synthetic stochastic-block-model dataset directory")
    p.add_argument("output", help="dataset directory to create")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="SBM field, e.g. classes=12")
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("show-report", help="print a report.json or aggregate.json as a table")
    p.add_argument("path", help="report file or run directory")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_show_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
