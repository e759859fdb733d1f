"""Leaky-integrator tanh reservoirs.

The reservoir update is

    x(n) = (1 - alpha) x(n-1) + alpha tanh(W_in [1; u(n)] + W x(n-1))

and every harvested column is the extended state ``[1; u(n); x(n)]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .exceptions import ConfigurationError, ContractError, WeightGenerationError

# dense eigvals below this size, ARPACK above
_DENSE_EIG_LIMIT = 1000


@dataclass(frozen=True)
class ReservoirConfig:
    """Hyper-parameters of one reservoir.

    Args:
        n_x: Number of reservoir units.
        n_u: Input dimension.
        alpha: Leaking rate in (0, 1].
        rho: Spectral radius the recurrent matrix is rescaled to.
        w_density: Fraction of nonzero recurrent weights. ``None`` means about
            ten connections per unit, ``min(1, 10 / n_x)``.
        input_scale: Input weights are drawn from ``[-input_scale, input_scale]``.
        seed: Seed for every random draw of the weights.
    """

    n_x: int
    n_u: int
    alpha: float
    rho: float
    w_density: Optional[float] = None
    input_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_x < 1 or self.n_u < 1:
            raise ContractError(f"n_x and n_u must be >= 1, got {self.n_x}, {self.n_u}")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.rho > 0.0:
            raise ContractError(f"rho must be > 0, got {self.rho}")
        if self.w_density is None:
            object.__setattr__(self, "w_density", min(1.0, 10.0 / self.n_x))
        if not 0.0 < self.w_density <= 1.0:
            raise ContractError(f"w_density must be in (0, 1], got {self.w_density}")
        if self.input_scale < 0.0:
            raise ContractError(f"input_scale must be >= 0, got {self.input_scale}")

    @property
    def n_r(self) -> int:
        return 1 + self.n_u + self.n_x

    def replace(self, **changes) -> "ReservoirConfig":
        fields = {
            "n_x": self.n_x, "n_u": self.n_u, "alpha": self.alpha, "rho": self.rho,
            "w_density": self.w_density, "input_scale": self.input_scale, "seed": self.seed,
        }
        fields.update(changes)
        return ReservoirConfig(**fields)

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x, "n_u": self.n_u, "alpha": self.alpha, "rho": self.rho,
            "w_density": self.w_density, "input_scale": self.input_scale, "seed": self.seed,
        }


@dataclass(frozen=True)
class ReservoirWeights:
    """Fixed random input matrix ``w_in`` (n_x, 1+n_u) and CSR recurrent ``w``."""

    w_in: np.ndarray
    w: sp.csr_matrix

    def __post_init__(self):
        if self.w_in.ndim != 2 or self.w.shape != (self.w_in.shape[0],) * 2:
            raise ContractError(
                f"inconsistent weight shapes {self.w_in.shape} and {self.w.shape}"
            )
        w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        w_in.setflags(write=False)
        w = sp.csr_matrix(self.w, dtype=np.float64)
        w.sort_indices()
        w.indices = w.indices.astype(np.intc)
        w.indptr = w.indptr.astype(np.intc)
        for arr in (w.data, w.indices, w.indptr):
            arr.setflags(write=False)
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w", w)

    @property
    def n_x(self) -> int:
        return self.w_in.shape[0]

    @property
    def n_u(self) -> int:
        return self.w_in.shape[1] - 1

    @property
    def n_r(self) -> int:
        return 1 + self.n_u + self.n_x

    def csr_arrays(self):
        return self.w.data, self.w.indices, self.w.indptr


@dataclass
class StateHarvest:
    """Extended states ``x_ext`` (n_r, L - washout) and the final state."""

    x_ext: np.ndarray
    x_final: np.ndarray = field(repr=False)


def spectral_radius(w) -> float:
    """Largest eigenvalue modulus of a square (sparse or dense) matrix."""
    n = w.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        dense = w.toarray() if sp.issparse(w) else np.asarray(w)
        return float(np.max(np.abs(np.linalg.eigvals(dense))))
    try:
        vals = spla.eigs(sp.csr_matrix(w), k=6, which="LM", tol=1e-12,
                         return_eigenvectors=False, maxiter=100 * n)
        return float(np.max(np.abs(vals)))
    except spla.ArpackNoConvergence:
        return float(np.max(np.abs(np.linalg.eigvals(w.toarray()))))


def generate_weights(config: ReservoirConfig) -> ReservoirWeights:
    """Draw ``W_in`` and a sparse ``W`` rescaled to spectral radius ``config.rho``.

    Raises:
        WeightGenerationError: if the raw sparse draw has zero spectral radius
            (e.g. a nilpotent sparsity pattern), so it cannot be rescaled.
    """
    rng = np.random.default_rng(config.seed)
    n_x = config.n_x
    # guard the ceil against 0.2 * 2500 = 500.00000000000006
    nnz = max(1, math.ceil(config.w_density * n_x * n_x - 1e-9))
    flat = rng.choice(n_x * n_x, size=nnz, replace=False)
    values = rng.uniform(-1.0, 1.0, size=nnz)
    w = sp.csr_matrix((values, (flat // n_x, flat % n_x)), shape=(n_x, n_x))
    radius = spectral_radius(w)
    if not radius > 1e-12:
        raise WeightGenerationError(
            f"raw recurrent matrix has spectral radius {radius:.3g} "
            f"(n_x={n_x}, nnz={nnz}, seed={config.seed}); cannot rescale"
        )
    w = w * (config.rho / radius)
    w_in = rng.uniform(-config.input_scale, config.input_scale, size=(n_x, 1 + config.n_u))
    return ReservoirWeights(w_in=w_in, w=w)


def _check_weights(weights: ReservoirWeights, config: ReservoirConfig):
    if weights.n_x != config.n_x or weights.n_u != config.n_u:
        raise ContractError(
            f"weights are ({weights.n_x}, {weights.n_u}) but config says "
            f"({config.n_x}, {config.n_u})"
        )


def update_state(weights: ReservoirWeights, config: ReservoirConfig,
                 x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One reservoir step from state ``x`` with input ``u``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (weights.n_x,) or u.shape != (weights.n_u,):
        raise ContractError(
            f"expected x of shape ({weights.n_x},) and u of shape ({weights.n_u},), "
            f"got {x.shape} and {u.shape}"
        )
    pre = weights.w_in[:, 0] + weights.w_in[:, 1:] @ u + weights.w @ x
    return (1.0 - config.alpha) * x + config.alpha * np.tanh(pre)


def _as_inputs(inputs, n_u: int) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1 and n_u == 1:
        inputs = inputs[None, :]
    if inputs.ndim != 2 or inputs.shape[0] != n_u:
        raise ContractError(f"inputs must be ({n_u}, L), got {inputs.shape}")
    return inputs


def harvest(weights: ReservoirWeights, config: ReservoirConfig, inputs,
            x0: Optional[np.ndarray] = None, washout: int = 0,
            impl: Optional[str] = None) -> StateHarvest:
    """Drive the reservoir with ``inputs`` (n_u, L) and collect extended states.

    The first ``washout`` steps are run but not returned. Passing the
    ``x_final`` of one harvest as ``x0`` of the next continues the run exactly.
    """
    _check_weights(weights, config)
    inputs = _as_inputs(inputs, weights.n_u)
    L = inputs.shape[1]
    if washout < 0 or washout >= L:
        raise ConfigurationError(f"washout {washout} leaves nothing of {L} steps")
    x0 = np.zeros(weights.n_x) if x0 is None else np.asarray(x0, dtype=np.float64)
    if x0.shape != (weights.n_x,):
        raise ContractError(f"x0 must have shape ({weights.n_x},), got {x0.shape}")
    x_ext, x_final = kernels.get(impl).run_reservoir(
        weights.w_in, *weights.csr_arrays(), float(config.alpha),
        np.ascontiguousarray(inputs.T), x0, int(washout),
    )
    return StateHarvest(x_ext=x_ext, x_final=x_final)


def run_states(weights: ReservoirWeights, config: ReservoirConfig, inputs,
               x0: Optional[np.ndarray] = None, impl: Optional[str] = None):
    """Like :func:`harvest` without washout; accepts zero-length input.

    Returns ``(x_ext, x_final)``.
    """
    inputs = _as_inputs(inputs, weights.n_u)
    x0 = np.zeros(weights.n_x) if x0 is None else np.asarray(x0, dtype=np.float64)
    if inputs.shape[1] == 0:
        return np.empty((weights.n_r, 0), order="F"), x0.copy()
    res = harvest(weights, config, inputs, x0=x0, impl=impl)
    return res.x_ext, res.x_final


def closed_loop(weights: ReservoirWeights, config: ReservoirConfig, w_out: np.ndarray,
                x0: np.ndarray, u0: np.ndarray, horizon: int,
                impl: Optional[str] = None):
    """Run generatively for ``horizon`` steps starting from state ``x0``.

    ``u0`` is the (known) input of the first step; afterwards every output is
    fed back as the next input. Returns ``(outputs (n_y, horizon), x_final)``.
    """
    _check_weights(weights, config)
    w_out = np.ascontiguousarray(w_out, dtype=np.float64)
    return kernels.get(impl).run_closed_loop(
        weights.w_in, *weights.csr_arrays(), float(config.alpha), w_out,
        np.asarray(x0, dtype=np.float64), np.atleast_1d(np.asarray(u0, dtype=np.float64)),
        int(horizon),
    )


def aggregate_sequence(weights: ReservoirWeights, config: ReservoirConfig, sequence,
                       mode: str = "last_state", impl: Optional[str] = None) -> np.ndarray:
    """Collapse one sequence (n_u, L_s) to a single extended state.

    The reservoir restarts from zero. ``mode`` is ``"last_state"`` or
    ``"mean_state"``.
    """
    sequence = _as_inputs(sequence, weights.n_u)
    if sequence.shape[1] < 1:
        raise ContractError("cannot aggregate an empty sequence")
    x_ext = harvest(weights, config, sequence, impl=impl).x_ext
    if mode == "last_state":
        return x_ext[:, -1].copy()
    if mode == "mean_state":
        return x_ext.mean(axis=1)
    raise ContractError(f"unknown aggregation mode {mode!r}")


def aggregate_sequences(weights: ReservoirWeights, config: ReservoirConfig,
                        sequences: Sequence, mode: str = "last_state",
                        impl: Optional[str] = None) -> np.ndarray:
    """Stack :func:`aggregate_sequence` over sequences into (n_r, M)."""
    out = np.empty((weights.n_r, len(sequences)), order="F")
    for m, seq in enumerate(sequences):
        out[:, m] = aggregate_sequence(weights, config, seq, mode, impl=impl)
    return out
