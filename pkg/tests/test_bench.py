import numpy as np
import pytest

from esncv.bench import BenchSpec, bench_csv, check_scaling, compare_kernels, run_bench
from esncv.exceptions import ConfigurationError

KS = (2, 5, 21, 63)


def _table(naive_slope=1.0, reservoir_drift=1.0, large_faster=True):
    rows = []
    for n_r in (50, 500):
        for k in KS:
            totals = {"naive": 10.0 * k ** naive_slope, "small_k": 20.0 + k,
                      "large_k": 15.0 + (0.5 if large_faster else 2.0) * k}
            for backend, total in totals.items():
                res = 5.0 * (reservoir_drift if k == KS[-1] else 1.0)
                for phase, ms in (("total", total), ("reservoir", res)):
                    rows.append({"backend": backend, "n_r": n_r, "k": k, "phase": phase,
                                 "mean_ms": ms, "min_ms": ms})
    return rows


def test_scaling_pass():
    verdict = check_scaling(_table())
    assert verdict["status"] == "pass"
    assert verdict["details"]["naive_slope"][50] == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs,claim", [(dict(naive_slope=0.5), "a_naive_linear"),
                                          (dict(reservoir_drift=2.0), "b_small_k_reservoir_flat"),
                                          (dict(large_faster=False), "c_large_k_wins")])
def test_scaling_fail_names_claim(kwargs, claim):
    verdict = check_scaling(_table(**kwargs))
    assert verdict["status"] == "fail" and verdict["claims"][claim] is False


def test_scaling_inconclusive_for_narrow_sweeps():
    rows = [r for r in _table() if r["k"] in (2, 5)]
    assert check_scaling(rows)["status"] == "inconclusive"
    assert check_scaling([r for r in _table() if r["k"] == 21])["status"] == "inconclusive"
    assert check_scaling([])["status"] == "inconclusive"


def test_bench_spec_errors():
    with pytest.raises(ConfigurationError):
        BenchSpec(repeats=0)
    with pytest.raises(ConfigurationError):
        BenchSpec(T=100, folds=(2, 101))
    with pytest.raises(ConfigurationError):
        BenchSpec(sizes=(2,))
    with pytest.raises(ConfigurationError):
        BenchSpec(backends=("gpu",))


def test_tiny_bench_rows():
    spec = BenchSpec(T=120, sizes=(12,), folds=(2, 4), repeats=1)
    rows = run_bench(spec)
    assert len(rows) == 3 * 2 * 5
    assert all(r["min_ms"] <= r["mean_ms"] + 1e-9 for r in rows)
    assert bench_csv(rows).splitlines()[0] == "backend,n_r,k,phase,mean_ms,min_ms"


def test_small_k_not_slower_than_naive_at_two_folds():
    spec = BenchSpec(T=1260, sizes=(50,), folds=(2,), backends=("naive", "small_k"), repeats=3)
    rows = {r["backend"]: r["min_ms"] for r in run_bench(spec) if r["phase"] == "total"}
    assert rows["small_k"] <= 1.25 * rows["naive"]


def test_compare_kernels_agree():
    out = compare_kernels(n_x=20, T=200, repeats=1)
    assert "python" in out["best_ms"]
    assert out["max_abs_diff"] <= 1e-12
