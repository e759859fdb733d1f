import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esncv.exceptions import ContractError, SolverError, WoodburyError
from esncv.readout import (FoldStatistics, SufficientStatistics, accumulate, reg_diagonal,
                           ridge_readout, split_readout_naive, split_readout_subtract,
                           split_readout_woodbury, woodbury_inverse)


def _data(n_r, T, n_y=1, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_r, T))
    x[0] = 1.0
    y = rng.standard_normal((n_y, n_r)) @ x + 0.1 * rng.standard_normal((n_y, T))
    return x, y


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _folds(T, k):
    size = T // k
    cuts = [i * size for i in range(k)] + [T]
    return [(cuts[i], cuts[i + 1]) for i in range(k)]


def test_accumulate_is_additive():
    x, y = _data(6, 40)
    a = SufficientStatistics.empty(6, 1)
    accumulate(a, x[:, :15], y[:, :15])
    accumulate(a, x[:, 15:], y[:, 15:])
    b = SufficientStatistics.from_blocks(x, y)
    assert np.allclose(a.g, b.g, rtol=1e-13, atol=1e-12)
    assert np.allclose(a.p, b.p, rtol=1e-13, atol=1e-12)
    assert a.count == b.count == 40


def test_empty_block_changes_nothing():
    x, y = _data(5, 20)
    stats = SufficientStatistics.from_blocks(x, y)
    g, p = stats.g.copy(), stats.p.copy()
    stats.accumulate(np.empty((5, 0)), np.empty((1, 0)))
    assert np.array_equal(stats.g, g) and np.array_equal(stats.p, p) and stats.count == 20


def test_gram_matches_explicit_product():
    x, y = _data(8, 50, seed=1)
    stats = SufficientStatistics.from_blocks(x, y)
    assert np.max(np.abs(stats.g - x @ x.T)) <= 1e-12
    assert np.max(np.abs(stats.p - y @ x.T)) <= 1e-12


def test_accumulate_dimension_mismatch():
    stats = SufficientStatistics.empty(4, 1)
    with pytest.raises(ContractError):
        stats.accumulate(np.zeros((3, 5)), np.zeros((1, 5)))
    with pytest.raises(ContractError):
        stats.accumulate(np.zeros((4, 5)), np.zeros((1, 4)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=8), st.integers(0, 1000))
def test_gram_stays_symmetric(block_sizes, seed):
    rng = np.random.default_rng(seed)
    stats = SufficientStatistics.empty(7, 2)
    for L in block_sizes:
        stats.accumulate(rng.standard_normal((7, L)) * 10, rng.standard_normal((2, L)))
    assert np.max(np.abs(stats.g - stats.g.T)) <= 1e-10


def test_ridge_identity_examples():
    stats = SufficientStatistics(np.eye(2), [[3.0, 4.0]], 2, bias_index=None)
    assert np.allclose(ridge_readout(stats, 0.0).w_out, [[3, 4]])
    assert np.allclose(ridge_readout(stats, 1.0).w_out, [[1.5, 2.0]])


def test_ridge_normal_equations_residual():
    x, y = _data(8, 50, seed=2)
    stats = SufficientStatistics.from_blocks(x, y)
    w = ridge_readout(stats, 1e-3).w_out
    residual = w @ (stats.g + 1e-3 * reg_diagonal(8)) - stats.p
    assert np.max(np.abs(residual)) <= 1e-8


def test_bias_is_not_regularized():
    assert reg_diagonal(4)[0, 0] == 0.0
    assert np.array_equal(np.diag(reg_diagonal(4))[1:], [1, 1, 1])
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 400))
    x -= x.mean(axis=1, keepdims=True)
    x[0] = 1.0
    y = np.full((1, 400), 2.5)
    stats = SufficientStatistics.from_blocks(x, y)
    for beta in (1e-6, 1.0, 1e6):
        w = ridge_readout(stats, beta).w_out
        assert w[0, 0] == pytest.approx(2.5, abs=1e-9)
        assert np.mean(w @ x) == pytest.approx(2.5, abs=1e-9)
    assert np.max(np.abs(ridge_readout(stats, 1e6).w_out[0, 1:])) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 10), st.floats(1e-6, 10))
def test_monotone_shrinkage(seed, b1, delta):
    x, y = _data(6, 30, seed=seed)
    stats = SufficientStatistics.from_blocks(x, y)
    w1 = ridge_readout(stats, b1).w_out[:, 1:]
    w2 = ridge_readout(stats, b1 + delta).w_out[:, 1:]
    assert np.linalg.norm(w2) <= np.linalg.norm(w1) * (1 + 1e-9)


def test_singular_system_reports_condition():
    x, y = _data(10, 4)
    with pytest.raises(SolverError) as info:
        ridge_readout(SufficientStatistics.from_blocks(x, y), 0.0)
    assert info.value.condition is None or info.value.condition > 1e12
    with pytest.raises(ContractError):
        ridge_readout(SufficientStatistics.from_blocks(x, y), -1.0)


def test_ill_conditioned_solution_is_flagged():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 100))
    x[0] = 1.0
    x[3] = x[2] + 1e-7 * rng.standard_normal(100)
    readout = ridge_readout(SufficientStatistics.from_blocks(x, x[1:2]), 0.0)
    assert readout.ill_conditioned and readout.condition > 1e12


def test_naive_examples():
    x, y = _data(6, 60, seed=5)
    whole = ridge_readout(SufficientStatistics.from_blocks(x, y), 1e-3)
    assert np.array_equal(split_readout_naive([x], [y], 1e-3).w_out, whole.w_out)
    split = split_readout_naive([x[:, :25], x[:, 25:]], [y[:, :25], y[:, 25:]], 1e-3)
    assert _rel(split.w_out, whole.w_out) <= 1e-12


def test_subtract_examples():
    x, y = _data(6, 60, seed=6)
    g = SufficientStatistics.from_blocks(x, y)
    empty = FoldStatistics.empty(6, 1)
    assert np.allclose(split_readout_subtract(g, empty, 1e-2).w_out,
                       ridge_readout(g, 1e-2).w_out, rtol=1e-14, atol=0)
    fold1 = FoldStatistics.from_blocks(x[:, :30], y[:, :30])
    only2 = split_readout_naive([x[:, 30:]], [y[:, 30:]], 1e-2)
    assert _rel(split_readout_subtract(g, fold1, 1e-2).w_out, only2.w_out) <= 1e-10


@pytest.mark.parametrize("k,beta", [(5, 1e-6), (5, 1e-2), (5, 0.0)])
def test_subtract_matches_naive(k, beta):
    x, y = _data(30, 200, seed=7)
    g = SufficientStatistics.from_blocks(x, y)
    for s, e in _folds(200, k):
        fold = FoldStatistics.from_blocks(x[:, s:e], y[:, s:e])
        ref = split_readout_naive([x[:, :s], x[:, e:]], [y[:, :s], y[:, e:]], beta)
        assert _rel(split_readout_subtract(g, fold, beta).w_out, ref.w_out) <= 1e-8


def test_subtracting_everything_at_zero_beta_fails():
    x, y = _data(6, 30)
    g = SufficientStatistics.from_blocks(x, y)
    with pytest.raises(SolverError):
        split_readout_subtract(g, FoldStatistics.from_blocks(x, y), 0.0)


def test_woodbury_rank_zero_update():
    x, y = _data(6, 60, seed=8)
    g = SufficientStatistics.from_blocks(x, y)
    a_inv = g.inverse(1e-3)
    assert np.array_equal(woodbury_inverse(a_inv, np.empty((6, 0))), a_inv)
    out = split_readout_woodbury(g, FoldStatistics.empty(6, 1), 1e-3)
    assert _rel(out.w_out, ridge_readout(g, 1e-3).w_out) <= 1e-10


def test_woodbury_diagonal_example():
    updated = woodbury_inverse(np.diag([0.5, 0.5]), np.array([[1.0], [0.0]]))
    assert np.allclose(updated, np.diag([1.0, 0.5]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("k", [50, 200])
def test_woodbury_matches_naive(k):
    x, y = _data(30, 200, seed=9)
    g = SufficientStatistics.from_blocks(x, y)
    for beta in (0.0, 1e-6, 1e-2):
        for s, e in _folds(200, k):
            fold = FoldStatistics.from_blocks(x[:, s:e], y[:, s:e])
            ref = split_readout_naive([x[:, :s], x[:, e:]], [y[:, :s], y[:, e:]], beta)
            assert _rel(split_readout_woodbury(g, fold, beta).w_out, ref.w_out) <= 1e-6


def test_cached_inverse_contract():
    x, y = _data(12, 80, seed=10)
    g = SufficientStatistics.from_blocks(x, y)
    for beta in (0.0, 1e-4, 1.0):
        eye = g.inverse(beta) @ g.regularized(beta)
        assert np.max(np.abs(eye - np.eye(12))) <= 1e-6
    assert g.cached_betas() == [0.0, 1e-4, 1.0]
    g.accumulate(x[:, :3], y[:, :3])
    assert g.cached_betas() == []


def test_woodbury_singular_fold():
    x, y = _data(6, 30)
    g = SufficientStatistics.from_blocks(x, y)
    with pytest.raises(WoodburyError):
        split_readout_woodbury(g, FoldStatistics.from_blocks(x, y), 0.0)


def test_woodbury_needs_columns():
    x, y = _data(6, 30)
    g = SufficientStatistics.from_blocks(x, y)
    with pytest.raises(ContractError):
        split_readout_woodbury(g, FoldStatistics.from_blocks(x[:, :3], y[:, :3], retain=False),
                               1e-3)


def test_fold_statistics_combine():
    x, y = _data(5, 30, seed=11)
    parts = [FoldStatistics.from_blocks(x[:, a:b], y[:, a:b]) for a, b in [(0, 7), (7, 30)]]
    both = FoldStatistics.combine(parts)
    assert np.allclose(both.g_i, x @ x.T, atol=1e-10)
    assert both.count == 30 and np.array_equal(both.x_i, x)
