"""Ridge-regression readouts from sufficient statistics.

A readout solves ``W_out (G + beta I_mod) = P`` where ``G = X X^T``,
``P = Y X^T`` and ``I_mod`` is the identity with the bias entry zeroed, so
the constant-one row of the extended state is never shrunk.

Three ways to get the readout of a split that leaves some columns out:

* :func:`split_readout_naive` accumulates the training columns from scratch;
* :func:`split_readout_subtract` subtracts the left-out columns' statistics
  from the global ones (cost independent of the data length);
* :func:`split_readout_woodbury` downdates a cached global inverse with the
  Woodbury identity, which only inverts an ``L_i x L_i`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .exceptions import ContractError, SolverError, WoodburyError

ILL_CONDITIONED = 1e12
# inner Woodbury matrices worse than this are treated as singular
_WOODBURY_RCOND = 1e-12


@dataclass
class Readout:
    """Trained output matrix ``w_out`` (n_y, n_r) and its regularization."""

    w_out: np.ndarray
    beta: float
    condition: Optional[float] = None
    ill_conditioned: bool = False

    def predict(self, x_ext: np.ndarray) -> np.ndarray:
        return self.w_out @ x_ext


class SufficientStatistics:
    """Running sums ``g = X X^T``, ``p = Y X^T`` over ``count`` columns.

    Inverses ``(g + beta I_mod)^-1`` requested through :meth:`inverse` are
    cached per beta until the next :meth:`accumulate`.
    """

    def __init__(self, g: np.ndarray, p: np.ndarray, count: int = 0,
                 bias_index: Optional[int] = 0):
        self.g = np.array(g, dtype=np.float64)
        self.p = np.array(p, dtype=np.float64)
        if self.g.ndim != 2 or self.g.shape[0] != self.g.shape[1]:
            raise ContractError(f"g must be square, got {self.g.shape}")
        if self.p.ndim != 2 or self.p.shape[1] != self.g.shape[0]:
            raise ContractError(f"p must be (n_y, {self.g.shape[0]}), got {self.p.shape}")
        self.count = int(count)
        self.bias_index = bias_index
        self._inverses: dict[float, np.ndarray] = {}

    @classmethod
    def empty(cls, n_r: int, n_y: int, bias_index: Optional[int] = 0):
        return cls(np.zeros((n_r, n_r)), np.zeros((n_y, n_r)), 0, bias_index)

    @classmethod
    def from_blocks(cls, x_block, y_block, bias_index: Optional[int] = 0):
        x_block = np.asarray(x_block, dtype=np.float64)
        y_block = np.asarray(y_block, dtype=np.float64)
        stats = cls.empty(x_block.shape[0], y_block.shape[0], bias_index)
        return stats.accumulate(x_block, y_block)

    @property
    def n_r(self) -> int:
        return self.g.shape[0]

    @property
    def n_y(self) -> int:
        return self.p.shape[0]

    def accumulate(self, x_block, y_block) -> "SufficientStatistics":
        """Add the columns of ``x_block`` (n_r, L) and ``y_block`` (n_y, L) in place."""
        x_block = np.asarray(x_block, dtype=np.float64)
        y_block = np.asarray(y_block, dtype=np.float64)
        if x_block.ndim != 2 or x_block.shape[0] != self.n_r:
            raise ContractError(f"x_block must be ({self.n_r}, L), got {x_block.shape}")
        if y_block.ndim != 2 or y_block.shape != (self.n_y, x_block.shape[1]):
            raise ContractError(
                f"y_block must be ({self.n_y}, {x_block.shape[1]}), got {y_block.shape}"
            )
        if x_block.shape[1] == 0:
            return self
        gram = x_block @ x_block.T
        self.g += 0.5 * (gram + gram.T)
        self.p += y_block @ x_block.T
        self.count += x_block.shape[1]
        self._inverses.clear()
        return self

    def copy(self) -> "SufficientStatistics":
        return SufficientStatistics(self.g, self.p, self.count, self.bias_index)

    def __add__(self, other):
        return SufficientStatistics(self.g + other.g, self.p + other.p,
                                    self.count + other.count, self.bias_index)

    def __sub__(self, other):
        return SufficientStatistics(self.g - other.g, self.p - other.p,
                                    self.count - other.count, self.bias_index)

    def regularized(self, beta: float) -> np.ndarray:
        return self.g + beta * reg_diagonal(self.n_r, self.bias_index)

    def inverse(self, beta: float) -> np.ndarray:
        """Explicit ``(g + beta I_mod)^-1``, computed once per beta."""
        beta = float(beta)
        if beta not in self._inverses:
            factor, _ = _factor(self.regularized(beta))
            inv = sla.cho_solve(factor, np.eye(self.n_r), check_finite=False)
            self._inverses[beta] = 0.5 * (inv + inv.T)
        return self._inverses[beta]

    def cached_betas(self):
        return sorted(self._inverses)


@dataclass
class FoldStatistics:
    """Statistics of the columns a split leaves out of training.

    ``x_i`` and ``y_i`` keep the raw columns when the Woodbury backend or
    validation scoring needs them.
    """

    g_i: np.ndarray
    p_i: np.ndarray
    count: int
    x_i: Optional[np.ndarray] = None
    y_i: Optional[np.ndarray] = None

    @classmethod
    def from_blocks(cls, x_block, y_block, retain: bool = True) -> "FoldStatistics":
        x_block = np.asarray(x_block, dtype=np.float64)
        y_block = np.asarray(y_block, dtype=np.float64)
        gram = x_block @ x_block.T
        return cls(
            g_i=0.5 * (gram + gram.T),
            p_i=y_block @ x_block.T,
            count=x_block.shape[1],
            x_i=x_block if retain else None,
            y_i=y_block if retain else None,
        )

    @classmethod
    def empty(cls, n_r: int, n_y: int) -> "FoldStatistics":
        return cls(np.zeros((n_r, n_r)), np.zeros((n_y, n_r)), 0,
                   np.empty((n_r, 0)), np.empty((n_y, 0)))

    @classmethod
    def combine(cls, parts: Iterable["FoldStatistics"]) -> "FoldStatistics":
        """Sum several folds; raw columns are concatenated when all parts kept them."""
        parts = list(parts)
        if not parts:
            raise ContractError("combine needs at least one fold")
        g = parts[0].g_i.copy()
        p = parts[0].p_i.copy()
        for part in parts[1:]:
            g += part.g_i
            p += part.p_i
        keep = all(part.x_i is not None for part in parts)
        return cls(
            g_i=g, p_i=p, count=sum(part.count for part in parts),
            x_i=np.hstack([part.x_i for part in parts]) if keep else None,
            y_i=np.hstack([part.y_i for part in parts]) if keep else None,
        )


def reg_diagonal(n_r: int, bias_index: Optional[int] = 0) -> np.ndarray:
    """Diagonal of ``I_mod``: ones except a zero at ``bias_index``."""
    diag = np.eye(n_r)
    if bias_index is not None:
        diag[bias_index, bias_index] = 0.0
    return diag


def _factor(a: np.ndarray):
    """Cholesky factor plus condition estimate; raises SolverError if not SPD."""
    if not np.all(np.isfinite(a)):
        raise SolverError("system matrix has non-finite entries")
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SolverError(
            "system matrix is not positive definite", condition=_condition(a)
        ) from None
    anorm = np.abs(a).sum(axis=0).max()
    rcond, info = lapack.dpocon(factor[0], anorm, uplo="L")
    if info != 0 or rcond <= np.finfo(float).eps:
        raise SolverError(
            f"system matrix is numerically singular (rcond={rcond:.3g})",
            condition=np.inf if rcond == 0 else 1.0 / rcond,
        )
    return factor, 1.0 / rcond


def _condition(a: np.ndarray) -> float:
    try:
        return float(np.linalg.cond(a))
    except np.linalg.LinAlgError:
        return float("inf")


def _solve(g: np.ndarray, p: np.ndarray, beta: float, bias_index: Optional[int]) -> Readout:
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    a = g + beta * reg_diagonal(g.shape[0], bias_index)
    factor, cond = _factor(a)
    w_out = sla.cho_solve(factor, p.T, check_finite=False).T
    return Readout(w_out=np.ascontiguousarray(w_out), beta=float(beta), condition=cond,
                   ill_conditioned=cond > ILL_CONDITIONED)


def accumulate(stats: SufficientStatistics, x_block, y_block) -> SufficientStatistics:
    """Add a block of columns to ``stats`` (in place) and return it."""
    return stats.accumulate(x_block, y_block)


def ridge_readout(stats: SufficientStatistics, beta: float) -> Readout:
    """Ridge solution ``p (g + beta I_mod)^-1`` via a Cholesky solve.

    Raises:
        SolverError: if the regularized matrix is not numerically positive
            definite (typically ``beta = 0`` with too few columns).
    """
    return _solve(stats.g, stats.p, beta, stats.bias_index)


def split_readout_naive(x_train_blocks, y_train_blocks, beta: float,
                        bias_index: Optional[int] = 0) -> Readout:
    """Readout trained only on the given blocks (the reference backend)."""
    x_train_blocks = list(x_train_blocks)
    y_train_blocks = list(y_train_blocks)
    if not x_train_blocks or len(x_train_blocks) != len(y_train_blocks):
        raise ContractError("need matching, non-empty lists of x and y blocks")
    stats = SufficientStatistics.empty(
        np.shape(x_train_blocks[0])[0], np.shape(y_train_blocks[0])[0], bias_index
    )
    for xb, yb in zip(x_train_blocks, y_train_blocks):
        stats.accumulate(xb, yb)
    return ridge_readout(stats, beta)


def split_readout_subtract(global_stats: SufficientStatistics, fold: FoldStatistics,
                           beta: float) -> Readout:
    """Readout of the split that leaves ``fold`` out, by subtracting its statistics."""
    return _solve(global_stats.g - fold.g_i, global_stats.p - fold.p_i, beta,
                  global_stats.bias_index)


def woodbury_inverse(a_inv: np.ndarray, x_i: np.ndarray) -> np.ndarray:
    """``(A - x_i x_i^T)^-1`` from ``A^-1`` with the Woodbury identity.

    The outer products ``A^-1 x_i`` and ``x_i^T A^-1`` are formed first, so only
    an ``L x L`` system is solved.
    """
    if x_i.shape[1] == 0:
        return a_inv
    left = a_inv @ x_i
    inner = _woodbury_inner(x_i, left)
    return a_inv + left @ sla.cho_solve(inner, left.T, check_finite=False)


def _woodbury_inner(x_i: np.ndarray, left: np.ndarray):
    c = np.eye(x_i.shape[1]) - x_i.T @ left
    c = 0.5 * (c + c.T)
    try:
        factor = sla.cho_factor(c, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise WoodburyError(
            "I - X_i^T A^-1 X_i is not positive definite; the fold is too "
            "informative for this beta", condition=_condition(c)
        ) from None
    rcond, info = lapack.dpocon(factor[0], np.abs(c).sum(axis=0).max(), uplo="L")
    if info != 0 or rcond < _WOODBURY_RCOND:
        raise WoodburyError(
            f"I - X_i^T A^-1 X_i is nearly singular (rcond={rcond:.3g})",
            condition=np.inf if rcond == 0 else 1.0 / rcond,
        )
    return factor


def split_readout_woodbury(global_stats: SufficientStatistics, fold: FoldStatistics,
                           beta: float) -> Readout:
    """Readout of the split that leaves ``fold`` out, via a downdated inverse.

    Uses the cached ``(g + beta I_mod)^-1`` of ``global_stats`` and the raw fold
    columns. Never forms the full ``n_r x n_r`` downdated inverse: with
    ``B = A^-1 X_i`` and ``q = p - p_i`` the result is
    ``q A^-1 + (q B) (I - X_i^T B)^-1 B^T``.

    Raises:
        WoodburyError: if the inner matrix is (nearly) singular; the caller
            should fall back to another backend.
    """
    if fold.x_i is None:
        raise ContractError("the Woodbury backend needs the fold's raw columns (x_i)")
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    a_inv = global_stats.inverse(beta)
    q = global_stats.p - fold.p_i
    w_out = q @ a_inv
    x_i = fold.x_i
    if x_i.shape[1] > 0:
        left = a_inv @ x_i
        inner = _woodbury_inner(x_i, left)
        z = sla.cho_solve(inner, (q @ left).T, check_finite=False)
        w_out = w_out + (left @ z).T
    return Readout(w_out=np.ascontiguousarray(w_out), beta=float(beta))
