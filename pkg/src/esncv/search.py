"""Grid search over leaking rate and spectral radius across weight seeds.

The regularization sweep happens inside every cross-validation (it only
needs new solves), while each (alpha, rho, seed) point needs a fresh
reservoir run.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import FINAL_METHODS, EvaluationReport, TaskData, evaluate
from .exceptions import ConfigurationError, SearchError
from .reservoir import ReservoirConfig
from .splits import SplitPlan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """Hyper-parameter grid; every (alpha, rho) point is run once per seed."""

    alphas: tuple
    rhos: tuple
    betas: tuple
    n_x: int = 50
    seeds: tuple = (0,)
    w_density: Optional[float] = None
    input_scale: float = 1.0

    def __post_init__(self):
        for name in ("alphas", "rhos", "betas", "seeds"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigurationError(f"grid {name} is empty")
            object.__setattr__(self, name, values)
        if any(not 0 < a <= 1 for a in self.alphas):
            raise ConfigurationError(f"alphas must lie in (0, 1], got {self.alphas}")
        if any(r <= 0 for r in self.rhos):
            raise ConfigurationError(f"rhos must be > 0, got {self.rhos}")
        if any(b < 0 for b in self.betas):
            raise ConfigurationError(f"betas must be >= 0, got {self.betas}")

    def points(self) -> list[tuple[float, float]]:
        return list(itertools.product(self.alphas, self.rhos))

    def config(self, alpha: float, rho: float, seed: int, n_u: int) -> ReservoirConfig:
        return ReservoirConfig(n_x=self.n_x, n_u=n_u, alpha=alpha, rho=rho,
                               w_density=self.w_density, input_scale=self.input_scale,
                               seed=seed)

    def to_dict(self) -> dict:
        return {"alphas": list(self.alphas), "rhos": list(self.rhos),
                "betas": list(self.betas), "n_x": self.n_x, "seeds": list(self.seeds),
                "w_density": self.w_density, "input_scale": self.input_scale}


@dataclass
class PointResult:
    point_id: int
    alpha: float
    rho: float
    seed: int
    report: EvaluationReport

    @property
    def score(self) -> float:
        return self.report.common_val


@dataclass
class SearchResult:
    """Everything a grid search produced.

    ``best_config`` minimizes the validation score averaged over seeds;
    ``best_per_seed`` repeats the selection separately for every seed, which
    is what repeated independent experiments report.
    """

    best_config: dict
    best_per_seed: dict
    per_point_reports: list
    aggregate: list = field(default_factory=list)

    def scatter_rows(self) -> list[dict]:
        rows = []
        for pr in self.per_point_reports:
            for method, test in pr.report.test_scores.items():
                rows.append({"point_id": pr.point_id, "seed": pr.seed, "alpha": pr.alpha,
                             "rho": pr.rho, "beta": pr.report.common_beta,
                             "final": method, "val": pr.report.common_val, "test": test})
        return rows

    def scatter_csv(self) -> str:
        return _to_csv(self.scatter_rows(), ["point_id", "seed", "alpha", "rho", "beta",
                                             "final", "val", "test"])


def _to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _selection_key(score: float, beta: float, rho: float, alpha: float):
    # lower score, then stronger regularization, smaller rho, smaller alpha
    return (score if math.isfinite(score) else math.inf, -beta, rho, alpha)


def _evaluate_point(args):
    (point_id, alpha, rho, seed, data, plan, grid, backend, methods, memory,
     aggregation, impl, shuffle) = args
    if shuffle:
        data = data.permuted(seed)
    config = grid.config(alpha, rho, seed, data.n_u)
    report = evaluate(data, plan, config, grid.betas, backend=backend, methods=methods,
                      memory=memory, aggregation=aggregation, impl=impl)
    return PointResult(point_id, alpha, rho, seed, report)


def grid_search(data: TaskData, plan: SplitPlan, grid: GridSpec, backend: str = "small_k",
                methods: Sequence[str] = FINAL_METHODS, jobs: int = 1, memory: str = "store",
                aggregation: str = "last_state", impl: Optional[str] = None,
                shuffle: bool = False) -> SearchResult:
    """Cross-validate every grid point and pick the best one.

    Args:
        jobs: Worker processes; ``None`` or ``0`` uses every logical core.
        shuffle: Re-order the training sequences with each seed before
            planning (classification only).

    Raises:
        SearchError: if no point has a finite validation score.
    """
    jobs = jobs or os.cpu_count() or 1
    tasks = [
        (pid, alpha, rho, seed, data, plan, grid, backend, tuple(methods), memory,
         aggregation, impl, shuffle)
        for pid, ((alpha, rho), seed) in enumerate(itertools.product(grid.points(), grid.seeds))
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_point, tasks, chunksize=1))
    else:
        results = [_evaluate_point(t) for t in tasks]
    if not any(math.isfinite(r.score) for r in results):
        raise SearchError("every grid point diverged or failed")

    # pooled selection: mean over seeds of the per-beta mean validation score
    best_config, best_key = None, None
    for alpha, rho in grid.points():
        at_point = [r for r in results if r.alpha == alpha and r.rho == rho]
        with np.errstate(invalid="ignore"):
            means = np.mean([r.report.mean_val_by_beta for r in at_point], axis=0)
        for beta, score in zip(grid.betas, means):
            key = _selection_key(float(score), beta, rho, alpha)
            if best_key is None or key < best_key:
                best_key = key
                best_config = {"alpha": alpha, "rho": rho, "beta": beta, "val": float(score)}

    best_per_seed = {}
    for seed in grid.seeds:
        candidates = [r for r in results if r.seed == seed]
        best_per_seed[seed] = min(candidates, key=lambda r: _selection_key(
            r.score, r.report.common_beta, r.rho, r.alpha))
    aggregate = aggregate_runs([best_per_seed[s].report for s in grid.seeds])
    return SearchResult(best_config, best_per_seed, results, aggregate)


def aggregate_runs(reports: Sequence[EvaluationReport]) -> list[dict]:
    """Mean and sample standard deviation of every (scheme, final method) cell.

    One row per cell and metric (``val``, ``test`` and, for classification,
    ``errors``). A single run reports std 0 with ``single_sample`` set.
    """
    if not reports:
        raise ConfigurationError("aggregate_runs needs at least one report")
    cells: dict[tuple, list[float]] = {}
    for rep in reports:
        for method, score in rep.test_scores.items():
            cells.setdefault((rep.scheme, method, "test"), []).append(score)
            cells.setdefault((rep.scheme, method, "val"), []).append(rep.mean_val)
            if method in rep.test_errors:
                cells.setdefault((rep.scheme, method, "errors"), []).append(
                    rep.test_errors[method])
    rows = []
    for (scheme, method, metric), values in cells.items():
        values = np.asarray(values, dtype=float)
        single = values.size == 1
        rows.append({
            "scheme": scheme, "final": method, "metric": metric,
            "mean": float(values.mean()),
            "std": 0.0 if single else float(values.std(ddof=1)),
            "n": int(values.size), "single_sample": single,
        })
    return rows


def aggregate_csv(rows: Sequence[dict]) -> str:
    return _to_csv(rows, ["scheme", "final", "metric", "mean", "std", "n", "single_sample"])
