import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from esncv import kernels, reservoir
from esncv.exceptions import ConfigurationError, ContractError, WeightGenerationError
from esncv.reservoir import ReservoirConfig, ReservoirWeights


def _zero_weights(n_x, n_u):
    return ReservoirWeights(np.zeros((n_x, 1 + n_u)), sp.csr_matrix((n_x, n_x)))


@pytest.mark.parametrize("n_x,rho,seed", [(10, 0.5, 0), (50, 0.85, 3), (200, 1.2, 7),
                                          (1200, 0.9, 1)])
def test_spectral_radius_matches_rho(n_x, rho, seed):
    cfg = ReservoirConfig(n_x=n_x, n_u=1, alpha=0.5, rho=rho, seed=seed)
    w = reservoir.generate_weights(cfg).w
    dense_radius = np.max(np.abs(np.linalg.eigvals(w.toarray())))
    assert abs(dense_radius - rho) / rho <= 1e-6


def test_generation_is_deterministic():
    cfg = ReservoirConfig(n_x=40, n_u=2, alpha=0.3, rho=0.9, seed=11)
    a, b = reservoir.generate_weights(cfg), reservoir.generate_weights(cfg)
    assert np.array_equal(a.w_in, b.w_in)
    assert np.array_equal(a.w.toarray(), b.w.toarray())
    c = reservoir.generate_weights(cfg.replace(seed=12))
    assert not np.array_equal(a.w_in, c.w_in)


def test_nonzero_count_and_input_range():
    cfg = ReservoirConfig(n_x=50, n_u=3, alpha=0.4, rho=0.85, w_density=0.2,
                          input_scale=0.3, seed=5)
    weights = reservoir.generate_weights(cfg)
    assert weights.w.nnz == 500
    assert weights.w_in.shape == (50, 4)
    assert np.all(np.abs(weights.w_in) <= 0.3)
    assert weights.w.data.min() < 0 < weights.w.data.max()


def test_default_density_is_ten_per_row():
    assert ReservoirConfig(n_x=50, n_u=1, alpha=1, rho=1).w_density == pytest.approx(0.2)
    assert ReservoirConfig(n_x=5, n_u=1, alpha=1, rho=1).w_density == 1.0


def test_grid_point_from_output_task_table():
    cfg = ReservoirConfig(n_x=50, n_u=1, alpha=0.4, rho=0.85)
    weights = reservoir.generate_weights(cfg)
    assert weights.n_r == 52


def test_degenerate_draw_raises():
    # a single off-diagonal nonzero is nilpotent
    raised, ok = 0, 0
    for seed in range(20):
        cfg = ReservoirConfig(n_x=3, n_u=1, alpha=1.0, rho=0.9, w_density=1 / 9, seed=seed)
        try:
            w = reservoir.generate_weights(cfg).w
        except WeightGenerationError:
            raised += 1
        else:
            ok += 1
            assert w.nnz == 1 and w.diagonal().any()
    assert raised > 0 and ok > 0


@pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(alpha=1.5), dict(rho=0.0),
                                    dict(n_x=0), dict(n_u=0), dict(w_density=0.0),
                                    dict(w_density=1.1)])
def test_config_invariants(kwargs):
    base = dict(n_x=10, n_u=1, alpha=0.5, rho=0.9)
    base.update(kwargs)
    with pytest.raises(ContractError):
        ReservoirConfig(**base)


def test_update_state_examples():
    cfg = ReservoirConfig(n_x=2, n_u=1, alpha=1.0, rho=1.0)
    zero = _zero_weights(2, 1)
    out = reservoir.update_state(zero, cfg, np.array([0.3, -0.7]), np.array([2.0]))
    assert np.array_equal(out, np.zeros(2))
    half = cfg.replace(alpha=0.5)
    out = reservoir.update_state(zero, half, np.array([0.8, -0.2]), np.array([1.0]))
    assert np.allclose(out, [0.4, -0.1], atol=1e-15)


def test_update_state_from_zero_state():
    cfg = ReservoirConfig(n_x=30, n_u=2, alpha=0.3, rho=0.9, seed=2)
    weights = reservoir.generate_weights(cfg)
    u = np.array([0.5, -1.0])
    out = reservoir.update_state(weights, cfg, np.zeros(30), u)
    expected = 0.3 * np.tanh(weights.w_in @ np.concatenate([[1.0], u]))
    assert np.allclose(out, expected, rtol=0, atol=1e-15)


def test_update_state_dimension_mismatch():
    cfg = ReservoirConfig(n_x=4, n_u=1, alpha=0.5, rho=0.9)
    weights = reservoir.generate_weights(cfg)
    with pytest.raises(ContractError):
        reservoir.update_state(weights, cfg, np.zeros(3), np.zeros(1))
    with pytest.raises(ContractError):
        reservoir.update_state(weights, cfg, np.zeros(4), np.zeros(2))


@pytest.fixture(scope="module")
def small_reservoir():
    cfg = ReservoirConfig(n_x=25, n_u=2, alpha=0.6, rho=0.95, seed=4)
    return cfg, reservoir.generate_weights(cfg)


def test_harvest_shapes_and_washout(small_reservoir):
    cfg, weights = small_reservoir
    u = np.random.default_rng(0).standard_normal((2, 10))
    with pytest.raises(ConfigurationError):
        reservoir.harvest(weights, cfg, u, washout=10)
    full = reservoir.harvest(weights, cfg, u)
    assert full.x_ext.shape == (28, 10)
    assert np.all(full.x_ext[0] == 1.0)
    assert np.array_equal(full.x_ext[1:3], u)
    part = reservoir.harvest(weights, cfg, u, washout=4)
    assert np.array_equal(part.x_ext, full.x_ext[:, 4:])
    assert np.array_equal(part.x_final, full.x_final)


def test_harvest_matches_stepwise_updates(small_reservoir):
    cfg, weights = small_reservoir
    u = np.random.default_rng(1).standard_normal((2, 15))
    x = np.zeros(25)
    states = []
    for n in range(15):
        x = reservoir.update_state(weights, cfg, x, u[:, n])
        states.append(x)
    got = reservoir.harvest(weights, cfg, u).x_ext[3:]
    assert np.allclose(got, np.array(states).T, rtol=0, atol=1e-13)


@pytest.mark.parametrize("impl", sorted(kernels.IMPLEMENTATIONS))
def test_chaining_is_bit_identical(small_reservoir, impl):
    cfg, weights = small_reservoir
    u = np.random.default_rng(2).standard_normal((2, 60))
    whole = reservoir.harvest(weights, cfg, u, impl=impl)
    a = reservoir.harvest(weights, cfg, u[:, :23], impl=impl)
    b = reservoir.harvest(weights, cfg, u[:, 23:], x0=a.x_final, impl=impl)
    assert np.array_equal(np.hstack([a.x_ext, b.x_ext]), whole.x_ext)
    assert np.array_equal(b.x_final, whole.x_final)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.05, 1.0), rho=st.floats(0.1, 3.0),
       scale=st.floats(0.1, 20.0))
def test_states_stay_bounded(seed, alpha, rho, scale):
    cfg = ReservoirConfig(n_x=15, n_u=1, alpha=alpha, rho=rho, input_scale=scale, seed=seed)
    weights = reservoir.generate_weights(cfg)
    u = np.random.default_rng(seed).uniform(-5, 5, (1, 40))
    x = reservoir.harvest(weights, cfg, u).x_ext[2:]
    assert np.all(np.abs(x) <= 1.0)


@pytest.mark.skipif("compiled" not in kernels.IMPLEMENTATIONS, reason="extension not built")
def test_compiled_and_python_kernels_agree(small_reservoir):
    cfg, weights = small_reservoir
    u = np.random.default_rng(3).standard_normal((2, 200))
    a = reservoir.harvest(weights, cfg, u, washout=7, impl="compiled")
    b = reservoir.harvest(weights, cfg, u, washout=7, impl="python")
    assert np.allclose(a.x_ext, b.x_ext, rtol=0, atol=1e-13)
    cfg1 = ReservoirConfig(n_x=30, n_u=1, alpha=0.5, rho=0.8, seed=1)
    w1 = reservoir.generate_weights(cfg1)
    w_out = np.random.default_rng(4).standard_normal((1, 32)) * 0.1
    ya, xa = reservoir.closed_loop(w1, cfg1, w_out, np.zeros(30), [0.2], 50, impl="compiled")
    yb, xb = reservoir.closed_loop(w1, cfg1, w_out, np.zeros(30), [0.2], 50, impl="python")
    assert np.allclose(ya, yb, rtol=0, atol=1e-12)
    assert np.allclose(xa, xb, rtol=0, atol=1e-12)


def test_closed_loop_feeds_outputs_back():
    cfg = ReservoirConfig(n_x=20, n_u=1, alpha=0.7, rho=0.9, seed=8)
    weights = reservoir.generate_weights(cfg)
    w_out = np.random.default_rng(5).standard_normal((1, 22)) * 0.2
    x0 = np.random.default_rng(6).uniform(-0.5, 0.5, 20)
    y, _ = reservoir.closed_loop(weights, cfg, w_out, x0, [0.3], 5)
    x, u = x0, np.array([0.3])
    for n in range(5):
        x = reservoir.update_state(weights, cfg, x, u)
        out = w_out @ np.concatenate([[1.0], u, x])
        assert out[0] == pytest.approx(y[0, n], abs=1e-13)
        u = out


def test_aggregate_sequence_modes(small_reservoir):
    cfg, weights = small_reservoir
    one = np.array([[0.4], [-0.1]])
    last = reservoir.aggregate_sequence(weights, cfg, one, "last_state")
    mean = reservoir.aggregate_sequence(weights, cfg, one, "mean_state")
    assert np.array_equal(last, mean)
    seq = np.random.default_rng(7).standard_normal((2, 3))
    cols = reservoir.harvest(weights, cfg, seq).x_ext
    assert np.allclose(reservoir.aggregate_sequence(weights, cfg, seq, "mean_state"),
                       cols.mean(axis=1), rtol=0, atol=1e-15)
    assert np.array_equal(reservoir.aggregate_sequence(weights, cfg, seq), cols[:, -1])
    with pytest.raises(ContractError):
        reservoir.aggregate_sequence(weights, cfg, np.zeros((2, 0)))
    with pytest.raises(ContractError):
        reservoir.aggregate_sequence(weights, cfg, seq, "max_state")


def test_aggregate_zero_system():
    cfg = ReservoirConfig(n_x=3, n_u=2, alpha=0.5, rho=1.0)
    out = reservoir.aggregate_sequence(_zero_weights(3, 2), cfg, np.zeros((2, 4)))
    assert np.array_equal(out, [1, 0, 0, 0, 0, 0])


def test_aggregate_restarts_from_zero(small_reservoir):
    cfg, weights = small_reservoir
    rng = np.random.default_rng(9)
    seqs = [rng.standard_normal((2, n)) for n in (4, 9, 2)]
    stacked = reservoir.aggregate_sequences(weights, cfg, seqs)
    assert stacked.shape == (28, 3)
    for m, seq in enumerate(seqs):
        assert np.array_equal(stacked[:, m], reservoir.aggregate_sequence(weights, cfg, seq))
