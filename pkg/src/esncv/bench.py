"""Wall-clock benchmark of the cross-validation backends versus fold count."""
from __future__ import annotations

import csv
import ctypes
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels, reservoir
from .evaluation import BACKENDS, CrossValidation, TaskData
from .exceptions import ConfigurationError
from .reservoir import ReservoirConfig
from .splits import SchemeSpec, plan_splits

PHASES = ("total", "reservoir", "statistics", "solve", "validate")
DEFAULT_FOLDS = (2, 5, 10, 21, 63, 126, 252, 630, 1260)


@dataclass(frozen=True)
class BenchSpec:
    """Benchmark grid. ``sizes`` are extended-state sizes ``n_r = n_x + 2``."""

    T: int = 1260
    sizes: tuple = (50, 500)
    folds: tuple = DEFAULT_FOLDS
    backends: tuple = BACKENDS
    repeats: int = 5
    seed: int = 0
    beta: float = 1e-6
    alpha: float = 0.5
    rho: float = 0.9

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if not self.folds or any(k < 2 or k > self.T for k in self.folds):
            raise ConfigurationError(f"every k must lie in [2, T={self.T}], got {self.folds}")
        if any(n_r < 3 for n_r in self.sizes):
            raise ConfigurationError(f"sizes must be >= 3 (bias, input, one unit), got {self.sizes}")
        unknown = set(self.backends) - set(BACKENDS)
        if unknown:
            raise ConfigurationError(f"unknown backends {sorted(unknown)}")


def _bench_data(spec: BenchSpec) -> TaskData:
    rng = np.random.default_rng(spec.seed)
    # one extra step is held out so the whole T is available for folds
    return TaskData.generative(rng.uniform(-1.0, 1.0, spec.T + 2), test_len=1)


def _pin_allocator():
    # glibc returns freed state matrices to the OS or keeps them depending on
    # allocation history, and re-faulting the pages costs more than a small
    # reservoir run; keeping large blocks on the heap makes that cost the same
    # for every cell. No-op where mallopt is unavailable.
    try:
        libc = ctypes.CDLL(None)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    # glibc caps the mmap threshold at 32 MB on 64-bit systems
    ok = mallopt(m_mmap_threshold, 32 * 2**20) == 1
    return mallopt(m_trim_threshold, 2**31 - 1) == 1 and ok


def run_bench(spec: BenchSpec, progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Time a full k-fold cross-validation per (backend, n_r, k) cell.

    Each backend is warmed up once at the smallest k. Then ``repeats`` timed
    rounds visit all cells of a size in a shuffled order, so bursts of machine
    noise fall on different cells in different rounds instead of on one k. Weights and
    data are built outside the timed region. Returns rows with ``backend``,
    ``n_r``, ``k``, ``phase``, ``mean_ms`` and ``min_ms``.
    """
    data = _bench_data(spec)
    _pin_allocator()
    plans = {k: plan_splits(SchemeSpec("CV", k=k), data.trainval_len, 0) for k in spec.folds}
    rows = []
    for n_r in spec.sizes:
        config = ReservoirConfig(n_x=n_r - 2, n_u=1, alpha=spec.alpha, rho=spec.rho,
                                 seed=spec.seed)
        weights = reservoir.generate_weights(config)
        for backend in spec.backends:
            CrossValidation(data, plans[min(spec.folds)], config, [spec.beta], backend,
                            weights=weights, memory="store").run()
        cells = [(k, b) for k in spec.folds for b in spec.backends]
        samples = {cell: {phase: [] for phase in PHASES} for cell in cells}
        order_rng = np.random.default_rng(spec.seed)
        for rep in range(1, spec.repeats + 1):
            for c in order_rng.permutation(len(cells)):
                k, backend = cells[c]
                cv = CrossValidation(data, plans[k], config, [spec.beta], backend,
                                     weights=weights, memory="store")
                t0 = time.perf_counter()
                cv.run()
                samples[k, backend]["total"].append((time.perf_counter() - t0) * 1e3)
                for phase in PHASES[1:]:
                    samples[k, backend][phase].append(cv.timer.ms.get(phase, 0.0))
            if progress:
                progress(f"n_r={n_r:4d} round {rep}/{spec.repeats} done")
        for k, backend in cells:
            for phase in PHASES:
                values = samples[k, backend][phase]
                rows.append({"backend": backend, "n_r": n_r, "k": k, "phase": phase,
                             "mean_ms": float(np.mean(values)),
                             "min_ms": float(np.min(values))})
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["backend", "n_r", "k", "phase", "mean_ms",
                                             "min_ms"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _series(rows, backend, n_r, phase):
    pts = sorted((r["k"], r["min_ms"]) for r in rows
                 if r["backend"] == backend and r["n_r"] == n_r and r["phase"] == phase)
    return [p[0] for p in pts], [p[1] for p in pts]


def check_scaling(rows: Sequence[dict], min_ks: int = 4, min_span: float = 8.0,
                  slope_min: float = 0.8, flat_max: float = 1.5) -> dict:
    """Check the fold-count scaling claims on a timing table (uses ``min_ms``).

    (a) naive total time grows at least linearly in k: log-log slope
    ``>= slope_min`` for every size; (b) small_k reservoir time is flat in k:
    max/min ``<= flat_max`` for every size; (c) at the largest k and size,
    large_k's total beats small_k's. The verdict is ``"inconclusive"`` unless
    at least ``min_ks`` k values spanning ``min_span`` times are present.
    """
    ks = sorted({r["k"] for r in rows})
    sizes = sorted({r["n_r"] for r in rows})
    verdict = {"status": "inconclusive", "claims": {}, "details": {}}
    if len(ks) < min_ks or not ks or ks[-1] / ks[0] < min_span:
        verdict["details"]["reason"] = (
            f"need >= {min_ks} k values spanning >= {min_span}x, got {ks}"
        )
        return verdict
    claims, details = verdict["claims"], verdict["details"]

    slopes = {}
    for n_r in sizes:
        k, t = _series(rows, "naive", n_r, "total")
        if len(k) >= 2:
            slopes[n_r] = float(np.polyfit(np.log(k), np.log(t), 1)[0])
    if slopes:
        details["naive_slope"] = slopes
        claims["a_naive_linear"] = all(s >= slope_min for s in slopes.values())

    ratios = {}
    for n_r in sizes:
        _, t = _series(rows, "small_k", n_r, "reservoir")
        if t and min(t) > 0:
            ratios[n_r] = max(t) / min(t)
    if ratios:
        details["small_k_reservoir_ratio"] = ratios
        claims["b_small_k_reservoir_flat"] = all(r <= flat_max for r in ratios.values())

    big = sizes[-1]
    totals = {}
    for backend in ("small_k", "large_k"):
        k, t = _series(rows, backend, big, "total")
        if k:
            totals[backend] = dict(zip(k, t))
    if len(totals) == 2:
        k_max = max(set(totals["small_k"]) & set(totals["large_k"]))
        details["largest_k"] = {"k": k_max, "n_r": big, "small_k_ms": totals["small_k"][k_max],
                                "large_k_ms": totals["large_k"][k_max]}
        claims["c_large_k_wins"] = totals["large_k"][k_max] < totals["small_k"][k_max]

    if claims:
        verdict["status"] = "pass" if all(claims.values()) else "fail"
    return verdict


def compare_kernels(n_x: int = 100, T: int = 2000, repeats: int = 5, seed: int = 0) -> dict:
    """Best-of-``repeats`` time of every available reservoir implementation.

    Also reports the largest state difference between implementations.
    """
    config = ReservoirConfig(n_x=n_x, n_u=1, alpha=0.5, rho=0.9, seed=seed)
    weights = reservoir.generate_weights(config)
    inputs = np.random.default_rng(seed).uniform(-1.0, 1.0, (1, T))
    times, states = {}, {}
    for name in kernels.IMPLEMENTATIONS:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            states[name] = reservoir.harvest(weights, config, inputs, impl=name).x_ext
            best = min(best, time.perf_counter() - t0)
        times[name] = best * 1e3
    names = list(states)
    diff = max((float(np.max(np.abs(states[a] - states[b])))
                for a in names for b in names if a < b), default=0.0)
    out = {"n_x": n_x, "T": T, "best_ms": times, "max_abs_diff": diff}
    if "compiled" in times and "python" in times:
        out["speedup"] = times["python"] / times["compiled"]
    return out
