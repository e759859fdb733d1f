"""Command-line front end: ``run`` experiments, ``bench`` backends, ``selftest``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import data as datamod
from .bench import DEFAULT_FOLDS, BenchSpec, bench_csv, check_scaling, run_bench
from .evaluation import BACKENDS, FINAL_METHODS, TASK_KINDS, CrossValidation, TaskData
from .exceptions import ESNCVError
from .reservoir import ReservoirConfig
from .search import GridSpec, aggregate_csv, grid_search
from .splits import SchemeSpec, plan_splits

logger = logging.getLogger("esncv")

DEFAULT_BETAS = [0.0] + [10.0 ** e for e in range(-9, 1)]
FORMATS = ("univariate_csv", "paired_csv", "japanese_vowels")


class ConfigError(ESNCVError):
    """Raised for unusable experiment configuration files."""


@dataclass
class ExperimentConfig:
    """A resolved experiment: every default made explicit."""

    name: str
    dataset: dict
    task: str
    schemes: list
    grid: dict
    backend: str = "small_k"
    final_methods: list = field(default_factory=lambda: list(FINAL_METHODS))
    aggregation: str = "last_state"
    memory: str = "store"
    shuffle: bool = False
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {
            "name": self.name, "dataset": self.dataset, "task": self.task,
            "schemes": self.schemes, "grid": self.grid, "backend": self.backend,
            "final_methods": self.final_methods, "aggregation": self.aggregation,
            "memory": self.memory, "shuffle": self.shuffle, "output_dir": self.output_dir,
        }


def _resolve_path(base: Path, value) -> str:
    path = Path(value)
    return str(path if path.is_absolute() else (base / path).resolve())


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML experiment file.

    Relative paths inside it are resolved against the file's directory.

    Raises:
        FileNotFoundError: for the config or any dataset file it names.
        ConfigError: for anything else that is wrong with it.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent

    ds = dict(raw.get("dataset") or {})
    fmt = ds.get("format", "univariate_csv")
    if fmt not in FORMATS:
        raise ConfigError(f"dataset.format must be one of {FORMATS}, got {fmt!r}")
    keys = ("train_path", "test_path") if fmt == "japanese_vowels" else ("path",)
    for key in keys:
        if key not in ds:
            raise ConfigError(f"dataset.{key} is required for format {fmt}")
        ds[key] = _resolve_path(base, ds[key])
        if not Path(ds[key]).is_file():
            raise FileNotFoundError(f"no such file: {ds[key]}")
    ds.setdefault("format", fmt)
    ds.setdefault("normalization", "none")
    ds.setdefault("test_len", 0)
    ds.setdefault("washout", 0)

    task = raw.get("task", "classification" if fmt == "japanese_vowels" else "generative")
    if task not in TASK_KINDS:
        raise ConfigError(f"task must be one of {TASK_KINDS}, got {task!r}")

    schemes = raw.get("schemes")
    if not schemes:
        raise ConfigError("at least one scheme is required")
    resolved_schemes = []
    for i, s in enumerate(schemes):
        try:
            resolved_schemes.append(SchemeSpec(**s).to_dict())
        except TypeError as exc:
            raise ConfigError(f"schemes[{i}]: {exc}") from None
        except ESNCVError as exc:
            raise ConfigError(f"schemes[{i}]: {exc}") from None

    grid = dict(raw.get("grid") or {})
    grid.setdefault("betas", DEFAULT_BETAS)
    grid.setdefault("n_x", 50)
    grid.setdefault("seeds", [0])
    grid.setdefault("w_density", None)
    grid.setdefault("input_scale", 1.0)
    for key in ("alphas", "rhos"):
        if key not in grid:
            raise ConfigError(f"grid.{key} is required")
    try:
        GridSpec(**grid)
    except (TypeError, ESNCVError) as exc:
        raise ConfigError(f"grid: {exc}") from None

    cfg = ExperimentConfig(
        name=str(raw.get("name", path.stem)), dataset=ds, task=task,
        schemes=resolved_schemes, grid=grid,
        backend=raw.get("backend", "small_k"),
        final_methods=list(raw.get("final_methods", FINAL_METHODS)),
        aggregation=raw.get("aggregation", "last_state"),
        memory=raw.get("memory", "store"),
        shuffle=bool(raw.get("shuffle", task == "classification")),
        output_dir=_resolve_path(base, raw.get("output_dir", "runs")),
    )
    if cfg.backend not in BACKENDS:
        raise ConfigError(f"backend must be one of {BACKENDS}, got {cfg.backend!r}")
    bad = set(cfg.final_methods) - set(FINAL_METHODS)
    if bad:
        raise ConfigError(f"unknown final methods {sorted(bad)}")
    return cfg


def build_task(cfg: ExperimentConfig) -> tuple[TaskData, int]:
    """Load, normalize and wrap the dataset; returns the task and its washout."""
    ds = cfg.dataset
    if ds["format"] == "japanese_vowels":
        task = datamod.load_japanese_vowels(ds["train_path"], ds["test_path"]).to_task()
        return task, 0
    loader = datamod.load_paired_csv if ds["format"] == "paired_csv" else \
        datamod.load_univariate_csv
    series = loader(ds["path"], test_len=int(ds["test_len"]))
    series = datamod.normalize(series, ds["normalization"])
    task = series.to_task(cfg.task)
    washout = ds["washout"]
    if washout == "auto":
        washout = auto_washout(task.trainval_len, cfg.schemes, int(ds["test_len"]))
    return task, int(washout)


def auto_washout(trainval_len: int, schemes: list, fold_len: int) -> int:
    """Washout that leaves exactly k folds of ``fold_len`` for k-fold CV."""
    for s in schemes:
        if s["scheme"] == "CV" and s["folding"] == "k_fold":
            washout = trainval_len - s["k"] * fold_len
            if washout < 0:
                raise ConfigError(
                    f"{s['k']} folds of {fold_len} do not fit into {trainval_len} steps"
                )
            return washout
    raise ConfigError("washout 'auto' needs a k_fold CV scheme")


def _slug(index: int, scheme: dict) -> str:
    folding = "" if scheme["scheme"] == "SV" else f"-{scheme['folding']}"
    return f"{index:02d}-{scheme['scheme'].lower()}{folding}-gap_{scheme['gap']}"


def _write(path: Path, text: str, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.write_text(text)


def _fmt(x) -> str:
    return f"{x:.3f}" if math.isfinite(x) else str(x)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        task, washout = build_task(cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ESNCVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(**cfg.grid)
    resolved = cfg.to_dict() | {"washout_resolved": washout}
    try:
        _write(out_dir / f"{cfg.name}_resolved.yaml", yaml.safe_dump(resolved, sort_keys=False),
               args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    status = 0
    summary_rows, scatter_parts = [], []
    print(f"{'scheme':24s} {'final':16s} {'val':>10s} {'test':>18s} {'errors':>14s}")
    for i, scheme in enumerate(cfg.schemes):
        spec = SchemeSpec(**scheme)
        slug = _slug(i, scheme)
        try:
            plan = plan_splits(spec, task.trainval_len, washout)
            result = grid_search(task, plan, grid, backend=cfg.backend,
                                 methods=cfg.final_methods, jobs=args.jobs,
                                 memory=cfg.memory, aggregation=cfg.aggregation,
                                 shuffle=cfg.shuffle and task.kind == "classification")
        except ESNCVError as exc:
            print(f"{spec.label:24s} FAILED: {exc}")
            status = 1
            summary_rows.append({"scheme": spec.label, "final": "", "metric": "failed",
                                 "mean": "", "std": "", "n": 0, "single_sample": ""})
            continue
        report = {
            "config": resolved,
            "scheme": scheme,
            "label": spec.label,
            "plan": plan.to_dict(),
            "best_config": result.best_config,
            "seeds": list(grid.seeds),
            "best_per_seed": {
                str(seed): {"alpha": pr.alpha, "rho": pr.rho, "point_id": pr.point_id,
                            "report": pr.report.to_dict()}
                for seed, pr in result.best_per_seed.items()
            },
            "aggregate": result.aggregate,
        }
        csv_rows = []
        for seed, pr in result.best_per_seed.items():
            for row in pr.report.csv_rows(gap_variant=scheme["gap"]):
                csv_rows.append({"seed": seed, **row})
        try:
            _write(out_dir / f"{cfg.name}_{slug}.json", json.dumps(report, indent=1), args.force)
            _write(out_dir / f"{cfg.name}_{slug}.csv", _csv(csv_rows), args.force)
        except FileExistsError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for row in result.scatter_rows():
            scatter_parts.append({"scheme": spec.label, **row})
        summary_rows.extend(result.aggregate)
        cells = {(r["final"], r["metric"]): r for r in result.aggregate}
        for method in cfg.final_methods:
            test = cells.get((method, "test"))
            if test is None:
                print(f"{spec.label:24s} {method:16s} {'':>10s} {'n/a':>18s}")
                continue
            val = cells[(method, "val")]
            err = cells.get((method, "errors"))
            err_txt = f"{err['mean']:.2f} ± {err['std']:.2f}" if err else ""
            print(f"{spec.label:24s} {method:16s} {_fmt(val['mean']):>10s} "
                  f"{_fmt(test['mean']) + ' ± ' + _fmt(test['std']):>18s} {err_txt:>14s}")
        diverged = [s for s, pr in result.best_per_seed.items()
                    if any(pr.report.test_divergent.values())]
        if diverged:
            print(f"{spec.label:24s} note: test divergence for seeds {diverged}")
    try:
        _write(out_dir / f"{cfg.name}_scatter.csv", _csv(scatter_parts), args.force)
        _write(out_dir / f"{cfg.name}_summary.csv", aggregate_csv(summary_rows), args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return status


def _csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_bench(args) -> int:
    try:
        spec = BenchSpec(T=args.T, sizes=args.sizes, folds=args.folds,
                         backends=tuple(args.backends.split(",")), repeats=args.repeats,
                         seed=args.seed)
    except ESNCVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    path = Path(args.out) if args.out else None
    if path is not None and path.exists() and not args.force:
        print(f"error: {path} exists; pass --force to overwrite", file=sys.stderr)
        return 2
    rows = run_bench(spec, progress=print)
    verdict = check_scaling(rows)
    if path is not None:
        path.write_text(bench_csv(rows))
    print(json.dumps(verdict, indent=1))
    return 0


def selftest(T: int = 300, n_x: int = 18, folds=(2, 5, 50, 300),
             betas=(0.0, 1e-6, 1e-2), seed: int = 0) -> dict:
    """Largest relative deviation of each fast backend from the naive one."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, (1, T + 1))
    y = np.sin(np.cumsum(u, axis=1))
    task = TaskData.output(u, y, test_len=1)
    config = ReservoirConfig(n_x=n_x, n_u=1, alpha=0.5, rho=0.9, seed=seed)
    worst = {"small_k": 0.0, "large_k": 0.0}
    for k in folds:
        plan = plan_splits(SchemeSpec("CV", k=k), T, 0)
        ref = CrossValidation(task, plan, config, betas, "naive").run()
        for backend in worst:
            res = CrossValidation(task, plan, config, betas, backend).run()
            for a, b in zip(ref, res):
                for ra, rb in zip(a.readouts, b.readouts):
                    dev = np.linalg.norm(rb.w_out - ra.w_out) / np.linalg.norm(ra.w_out)
                    worst[backend] = max(worst[backend], float(dev))
    return worst


def cmd_selftest(args) -> int:
    worst = selftest()
    for backend, dev in worst.items():
        print(f"{backend:8s} max relative deviation from naive: {dev:.3e}")
    ok = all(dev <= 1e-6 for dev in worst.values())
    print("OK" if ok else "FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esncv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="grid-search every scheme of an experiment file")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    run.add_argument("--force", action="store_true", help="overwrite existing outputs")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="time the backends against the fold count")
    bench.add_argument("--T", type=int, default=1260)
    bench.add_argument("--sizes", type=_int_list, default=(50, 500))
    bench.add_argument("--folds", type=_int_list, default=DEFAULT_FOLDS)
    bench.add_argument("--backends", default=",".join(BACKENDS))
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="CSV output path")
    bench.add_argument("--force", action="store_true")
    bench.set_defaults(func=cmd_bench)

    st = sub.add_parser("selftest", help="check the fast backends against the naive one")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
