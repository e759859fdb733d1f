import numpy as np
import pytest

from esncv.evaluation import EvaluationReport, TaskData
from esncv.exceptions import ConfigurationError, SearchError
from esncv.search import GridSpec, aggregate_csv, aggregate_runs, grid_search
from esncv.splits import SchemeSpec, plan_splits


def _report(test, errors=None, scheme="CV k_fold k=5"):
    return EvaluationReport([], 0.1, {}, {"averaged": test}, {}, scheme=scheme,
                            test_errors={} if errors is None else {"averaged": errors})


def _task():
    n = np.arange(301)
    return TaskData.generative(np.sin(0.25 * n) * np.cos(0.031 * n), test_len=30)


def _plan(data):
    return plan_splits(SchemeSpec("CV", k=4), data.trainval_len, 20)


GRID = GridSpec(alphas=(0.3, 0.9), rhos=(0.5, 1.0), betas=(1e-6, 1e-2), n_x=15, seeds=(0, 1))


def test_aggregate_example():
    rows = aggregate_runs([_report(float(v)) for v in range(1, 6)])
    (test,) = [r for r in rows if r["metric"] == "test"]
    assert test["mean"] == 3.0
    assert test["std"] == pytest.approx(1.5811388, abs=1e-6)
    assert test["n"] == 5 and not test["single_sample"]


def test_aggregate_single_seed_is_flagged():
    rows = aggregate_runs([_report(0.4, errors=3)])
    assert {r["metric"] for r in rows} == {"val", "test", "errors"}
    assert all(r["std"] == 0.0 and r["single_sample"] for r in rows)
    assert aggregate_csv(rows).splitlines()[0] == "scheme,final,metric,mean,std,n,single_sample"
    with pytest.raises(ConfigurationError):
        aggregate_runs([])


def test_grid_spec_validation():
    with pytest.raises(ConfigurationError):
        GridSpec(alphas=(), rhos=(1.0,), betas=(0.0,))
    with pytest.raises(ConfigurationError):
        GridSpec(alphas=(1.5,), rhos=(1.0,), betas=(0.0,))
    with pytest.raises(ConfigurationError):
        GridSpec(alphas=(0.5,), rhos=(1.0,), betas=(-1.0,))
    assert len(GRID.points()) == 4


def test_one_point_grid():
    data = _task()
    grid = GridSpec(alphas=(0.5,), rhos=(0.9,), betas=(1e-4,), n_x=15)
    result = grid_search(data, _plan(data), grid, methods=("retrained",))
    assert result.best_config["alpha"] == 0.5 and result.best_config["beta"] == 1e-4
    assert len(result.per_point_reports) == 1


def test_best_config_is_argmin_of_seed_means():
    data = _task()
    result = grid_search(data, _plan(data), GRID, methods=("retrained",))
    means = {}
    for pr in result.per_point_reports:
        means.setdefault((pr.alpha, pr.rho), []).append(pr.report.mean_val_by_beta)
    best = min(((np.mean(v, axis=0)[j], a, r, GRID.betas[j])
                for (a, r), v in means.items() for j in range(len(GRID.betas))))
    assert result.best_config["val"] == pytest.approx(best[0])
    assert (result.best_config["alpha"], result.best_config["rho"],
            result.best_config["beta"]) == best[1:]
    for seed, pr in result.best_per_seed.items():
        assert pr.seed == seed
        assert pr.score == min(p.score for p in result.per_point_reports if p.seed == seed)


def test_search_is_reproducible_and_backend_invariant():
    data = _task()
    a = grid_search(data, _plan(data), GRID, methods=("retrained",))
    b = grid_search(data, _plan(data), GRID, methods=("retrained",))
    assert a.best_config == b.best_config and a.scatter_csv() == b.scatter_csv()
    c = grid_search(data, _plan(data), GRID, backend="naive", methods=("retrained",))
    assert (c.best_config["alpha"], c.best_config["rho"], c.best_config["beta"]) == \
        (a.best_config["alpha"], a.best_config["rho"], a.best_config["beta"])
    assert c.best_config["val"] == pytest.approx(a.best_config["val"], rel=1e-6)


def test_parallel_matches_serial():
    data = _task()
    a = grid_search(data, _plan(data), GRID, methods=("retrained",))
    b = grid_search(data, _plan(data), GRID, methods=("retrained",), jobs=2)
    assert a.best_config == b.best_config
    assert [p.score for p in a.per_point_reports] == [p.score for p in b.per_point_reports]


def test_scatter_rows_cover_every_point():
    data = _task()
    result = grid_search(data, _plan(data), GRID, methods=("retrained", "averaged"))
    assert len(result.scatter_rows()) == 2 * 4 * 2
    assert result.scatter_csv().startswith("point_id,seed,alpha,rho,beta,final,val,test")


def test_every_point_failing_raises():
    # unregularized fits on fewer samples than features are all singular
    data = TaskData.output(np.random.default_rng(0).standard_normal((1, 40)),
                           np.random.default_rng(1).standard_normal((1, 40)), test_len=5)
    plan = plan_splits(SchemeSpec("SV", val_len=20), data.trainval_len, 5)
    grid = GridSpec(alphas=(0.5,), rhos=(0.9,), betas=(0.0,), n_x=30)
    with pytest.raises(SearchError):
        grid_search(data, plan, grid, methods=("retrained",))
