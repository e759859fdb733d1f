"""Cross-validating readouts over a split plan and building final models.

The efficient backends run the reservoir once over the whole
training+validation region, keep statistics for every elementary segment
between plan boundaries, and obtain each split's readout by subtracting the
left-out segments from the global statistics (``small_k``) or by downdating
the global inverse (``large_k``). ``naive`` re-runs the reservoir and
re-accumulates the training columns for every split; it is the reference the
other two must reproduce.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import reservoir
from .exceptions import (ConfigurationError, ContractError, FinalizeError,
                         NormalizationError, SolverError, WoodburyError)
from .readout import (FoldStatistics, Readout, SufficientStatistics, ridge_readout,
                      split_readout_subtract, split_readout_woodbury)
from .reservoir import ReservoirConfig, ReservoirWeights
from .splits import SplitPlan

logger = logging.getLogger(__name__)

TASK_KINDS = ("generative", "output", "classification")
BACKENDS = ("naive", "small_k", "large_k")
FINAL_METHODS = ("averaged", "best", "retrained", "averaged_common", "ireg_retrained")
DIVERGENCE_FACTOR = 1e6


# ---------------------------------------------------------------- task data

@dataclass
class TaskData:
    """Inputs and targets of one task, with the test set as a suffix.

    For ``generative`` and ``output`` tasks ``inputs`` is (n_u, T) and
    ``targets`` (n_y, T); column ``n`` pairs input ``u(n)`` with target
    ``y(n)``. For ``classification`` ``inputs`` is a list of sequences and
    ``targets`` the 1-based class label of each.
    """

    kind: str
    inputs: object
    targets: np.ndarray
    test_range: tuple[int, int]
    n_classes: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "classification":
            self.inputs = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in self.inputs]
            self.targets = np.asarray(self.targets, dtype=int)
            if self.n_classes is None:
                self.n_classes = int(self.targets.max())
            if self.targets.min() < 1 or self.targets.max() > self.n_classes:
                raise ContractError(f"labels must lie in [1, {self.n_classes}]")
            if len(self.inputs) != len(self.targets):
                raise ContractError("one label per sequence required")
        else:
            self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
            if self.inputs.shape[1] != self.targets.shape[1]:
                raise ContractError("inputs and targets must have the same length")
            if self.kind == "generative" and self.inputs.shape[0] != self.targets.shape[0]:
                raise ContractError("generative tasks need n_u == n_y")
        start, end = self.test_range
        if end != self.total_len or not 0 < start < end:
            raise ContractError(
                f"test_range {self.test_range} must be a non-empty proper suffix of "
                f"[0, {self.total_len})"
            )

    @property
    def total_len(self) -> int:
        return len(self.inputs) if self.kind == "classification" else self.inputs.shape[1]

    @property
    def trainval_len(self) -> int:
        return self.test_range[0]

    @property
    def n_u(self) -> int:
        if self.kind == "classification":
            return self.inputs[0].shape[0]
        return self.inputs.shape[0]

    @property
    def n_y(self) -> int:
        return self.n_classes if self.kind == "classification" else self.targets.shape[0]

    def target_matrix(self, start: int = 0, end: Optional[int] = None) -> np.ndarray:
        if self.kind == "classification":
            return one_hot(self.targets[start:end], self.n_classes)
        return self.targets[:, start:end]

    @classmethod
    def generative(cls, series, test_len: int, name: str = "") -> "TaskData":
        """Next-step prediction of ``series`` (n_dims, T) with teacher forcing.

        Step ``n`` takes ``series[:, n]`` as input and ``series[:, n + 1]`` as
        target, so there are ``T - 1`` steps; the last ``test_len`` are tested.
        """
        series = np.atleast_2d(np.asarray(series, dtype=np.float64))
        steps = series.shape[1] - 1
        return cls("generative", series[:, :-1], series[:, 1:],
                   (steps - test_len, steps), name=name)

    @classmethod
    def output(cls, inputs, targets, test_len: int, name: str = "") -> "TaskData":
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        T = inputs.shape[1]
        return cls("output", inputs, targets, (T - test_len, T), name=name)

    @classmethod
    def classification(cls, train_sequences, train_labels, test_sequences, test_labels,
                       n_classes: Optional[int] = None, name: str = "") -> "TaskData":
        seqs = list(train_sequences) + list(test_sequences)
        labels = np.concatenate([np.asarray(train_labels), np.asarray(test_labels)])
        M = len(train_sequences)
        return cls("classification", seqs, labels, (M, len(seqs)), n_classes, name)

    def permuted(self, seed: int) -> "TaskData":
        """Shuffle the training sequences of a classification task."""
        if self.kind != "classification":
            raise ContractError("only sequence sets can be permuted")
        M = self.trainval_len
        order = np.random.default_rng(seed).permutation(M)
        seqs = [self.inputs[i] for i in order] + self.inputs[M:]
        labels = np.concatenate([self.targets[order], self.targets[M:]])
        return TaskData("classification", seqs, labels, self.test_range,
                        self.n_classes, self.name)


def one_hot(labels, n_classes: int) -> np.ndarray:
    """(n_classes, M) matrix with a 1 in row ``label - 1`` of each column."""
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((n_classes, labels.size))
    out[labels - 1, np.arange(labels.size)] = 1.0
    return out


# ------------------------------------------------------------------ scoring

@dataclass
class Score:
    value: float
    divergent: bool = False
    misclassifications: Optional[int] = None

    def __float__(self):
        return float(self.value)


def nrmse(pred, target, pooled: bool = False) -> float:
    """Root of the mean squared error over the target variance.

    By default each output dimension is normalized by its own variance and
    the ratios are averaged before the square root. ``pooled=True`` uses the
    variance of all target entries together (needed for one-hot targets where
    a class may be absent). An exact prediction scores 0 even for a constant
    target.

    Raises:
        NormalizationError: if a (used) target variance is zero and the
            prediction is not exact.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        sq = (pred - target) ** 2
        if np.all(sq == 0):
            return 0.0
        if pooled:
            var = target.var()
            if var == 0:
                raise NormalizationError("target is constant")
            return float(math.sqrt(sq.mean() / var))
        var = target.var(axis=1)
        if np.any(var == 0):
            raise NormalizationError("a target dimension is constant")
        return float(np.sqrt(np.mean(sq.mean(axis=1) / var)))


def _diverged(outputs: np.ndarray, targets: np.ndarray) -> bool:
    scale = float(np.max(np.abs(targets))) if targets.size else 0.0
    with np.errstate(invalid="ignore"):
        return bool(not np.all(np.isfinite(outputs))
                    or np.max(np.abs(outputs)) > DIVERGENCE_FACTOR * scale)


def score_generative(readout: Readout, weights: ReservoirWeights, config: ReservoirConfig,
                     warm_state, val_inputs, val_targets, horizon: int,
                     impl: Optional[str] = None) -> Score:
    """Closed-loop NRMSE over ``horizon`` steps from ``warm_state``.

    Only the first column of ``val_inputs`` is used: it is the known input of
    the first step; later inputs are the model's own outputs.
    """
    val_inputs = np.atleast_2d(val_inputs)
    val_targets = np.atleast_2d(val_targets)[:, :horizon]
    outputs, _ = reservoir.closed_loop(weights, config, readout.w_out, warm_state,
                                       val_inputs[:, 0], horizon, impl=impl)
    divergent = _diverged(outputs, val_targets)
    value = nrmse(outputs, val_targets)
    return Score(value, divergent or not math.isfinite(value))


def score_output(readout: Readout, x_ext_block, targets) -> Score:
    """Open-loop NRMSE of ``W_out x_ext`` against ``targets``."""
    x_ext_block = np.asarray(x_ext_block)
    if x_ext_block.shape[0] != readout.w_out.shape[1]:
        raise ContractError(
            f"states have {x_ext_block.shape[0]} rows, readout expects {readout.w_out.shape[1]}"
        )
    value = nrmse(readout.w_out @ x_ext_block, targets)
    return Score(value, not math.isfinite(value))


def predict_classes(outputs: np.ndarray) -> np.ndarray:
    """1-based argmax per column; ties go to the lowest class."""
    return np.argmax(outputs, axis=0) + 1


def score_classification(readout: Readout, aggregated_states, labels,
                         n_classes: Optional[int] = None) -> Score:
    """Pooled NRMSE against one-hot targets plus the argmax error count."""
    labels = np.asarray(labels, dtype=int)
    outputs = readout.w_out @ np.asarray(aggregated_states)
    n_classes = n_classes or outputs.shape[0]
    value = nrmse(outputs, one_hot(labels, n_classes), pooled=True)
    wrong = int(np.sum(predict_classes(outputs) != labels))
    return Score(value, not math.isfinite(value), wrong)


# ------------------------------------------------------------ column sources

class _StreamSource:
    """Teacher-forced reservoir columns of a continuous series."""

    sequential = True

    def __init__(self, data: TaskData, weights, config, impl):
        self.data, self.weights, self.config, self.impl = data, weights, config, impl

    def initial_state(self):
        return np.zeros(self.weights.n_x)

    def run(self, start, end, state):
        x_ext, final = reservoir.run_states(
            self.weights, self.config, self.data.inputs[:, start:end], state, impl=self.impl
        )
        return x_ext, self.data.targets[:, start:end], final

    def state_of_column(self, x_ext, j):
        return x_ext[1 + self.weights.n_u:, j].copy()


class _SequenceSource:
    """One aggregated extended state per (independent) sequence."""

    sequential = False

    def __init__(self, data: TaskData, weights, config, impl, aggregation):
        self.data, self.weights, self.config, self.impl = data, weights, config, impl
        self.aggregation = aggregation

    def initial_state(self):
        return None

    def run(self, start, end, state):
        x_ext = reservoir.aggregate_sequences(
            self.weights, self.config, self.data.inputs[start:end], self.aggregation,
            impl=self.impl,
        )
        return x_ext, self.data.target_matrix(start, end), None

    def state_of_column(self, x_ext, j):
        return None


def _make_source(data, weights, config, impl, aggregation):
    if data.kind == "classification":
        return _SequenceSource(data, weights, config, impl, aggregation)
    return _StreamSource(data, weights, config, impl)


class _Timer:
    def __init__(self):
        self.ms = defaultdict(float)

    def add(self, phase, since):
        self.ms[phase] += (time.perf_counter() - since) * 1e3


class _GlobalPass:
    """One run over the whole region, cut at every plan boundary.

    ``memory="store"`` keeps every extended state; ``"rerun"`` keeps only the
    global statistics and the reservoir state at each boundary, and re-runs
    segments from those states when their columns are needed. Statistics of
    individual segments are computed on first use and cached while they fit
    in ``cache_bytes``.
    """

    def __init__(self, source, plan: SplitPlan, memory: str, timer: _Timer,
                 cache_bytes: int = 256 * 2**20):
        if memory not in ("store", "rerun"):
            raise ConfigurationError(f"memory must be 'store' or 'rerun', got {memory!r}")
        self.source, self.plan, self.memory, self.timer = source, plan, memory, timer
        cuts = plan.boundaries()
        self.segments = list(zip(cuts[:-1], cuts[1:]))
        w, T = plan.washout, plan.trainval_len
        self.start_states = {}
        self._columns = {}
        self._seg_stats = {}
        self._cache_left = cache_bytes

        t0 = time.perf_counter()
        state = source.initial_state()
        if w > 0 and source.sequential:
            _, _, state = source.run(0, w, state)
        if memory == "store":
            x_all, y_all, self.end_state = source.run(w, T, state)
            timer.add("reservoir", t0)
            for a, b in self.segments:
                self.start_states[a] = (state if a == w
                                        else source.state_of_column(x_all, a - w - 1))
                self._columns[a, b] = (x_all[:, a - w:b - w], y_all[:, a - w:b - w])
            # accumulate segment by segment so both memory modes sum identically
            t0 = time.perf_counter()
            self.global_stats = SufficientStatistics.empty(x_all.shape[0], y_all.shape[0])
            for seg in self.segments:
                self.global_stats.accumulate(*self._columns[seg])
            timer.add("statistics", t0)
        else:
            stats_ms = 0.0
            self.global_stats = None
            for a, b in self.segments:
                self.start_states[a] = state
                x_seg, y_seg, state = source.run(a, b, state)
                t1 = time.perf_counter()
                if self.global_stats is None:
                    self.global_stats = SufficientStatistics.empty(x_seg.shape[0],
                                                                   y_seg.shape[0])
                self.global_stats.accumulate(x_seg, y_seg)
                stats_ms += (time.perf_counter() - t1) * 1e3
            self.end_state = state
            timer.add("reservoir", t0)
            timer.ms["reservoir"] -= stats_ms
            timer.ms["statistics"] += stats_ms

    def columns(self, a, b):
        if self.memory == "store":
            return self._columns[a, b]
        t0 = time.perf_counter()
        x_seg, y_seg, _ = self.source.run(a, b, self.start_states[a])
        self.timer.add("reservoir", t0)
        return x_seg, y_seg

    def segment_stats(self, seg) -> FoldStatistics:
        part = self._seg_stats.get(seg)
        if part is None:
            x_seg, y_seg = self.columns(*seg)
            t0 = time.perf_counter()
            part = FoldStatistics.from_blocks(x_seg, y_seg, retain=False)
            self.timer.add("statistics", t0)
            size = part.g_i.nbytes + part.p_i.nbytes
            if size <= self._cache_left:
                self._seg_stats[seg] = part
                self._cache_left -= size
        return part

    def left_out(self, split, columns_only: bool = False) -> FoldStatistics:
        """Statistics of every column the split does not train on.

        With ``columns_only`` the fold keeps its raw columns and ``p_i`` but
        skips the Gram matrix, which the Woodbury backend never needs.
        """
        train = split.train_segments
        excluded = [(a, b) for a, b in self.segments
                    if not any(s <= a and b <= e for s, e in train)]
        if not excluded:
            return FoldStatistics.empty(self.global_stats.n_r, self.global_stats.n_y)
        if columns_only:
            parts = [self.columns(*seg) for seg in excluded]
            x_i = np.hstack([p[0] for p in parts])
            y_i = np.hstack([p[1] for p in parts])
            t0 = time.perf_counter()
            p_i = y_i @ x_i.T
            self.timer.add("statistics", t0)
            return FoldStatistics(None, p_i, x_i.shape[1], x_i, y_i)
        return FoldStatistics.combine(self.segment_stats(seg) for seg in excluded)

    def window(self, start, end):
        parts = [self.columns(a, b) for a, b in self.segments if start <= a and b <= end]
        return np.hstack([p[0] for p in parts]), np.hstack([p[1] for p in parts])


# ------------------------------------------------------------ split results

@dataclass
class SplitResult:
    """Outcome of one split over the whole beta grid.

    ``readout``/``val_score``/``best_beta`` are at this split's own best beta;
    ``beta_scores`` and ``readouts`` hold the full sweep (``inf``/``None``
    where the solve failed).
    """

    split_index: int
    readout: Optional[Readout]
    val_score: float
    best_beta: float
    betas: tuple
    beta_scores: np.ndarray
    readouts: list
    beta_errors: Optional[np.ndarray] = None
    divergent: bool = False
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "val_score": _json_float(self.val_score),
            "best_beta": self.best_beta,
            "divergent": self.divergent,
            "flags": list(self.flags),
            "beta_scores": [_json_float(s) for s in self.beta_scores],
            "beta_errors": None if self.beta_errors is None else
            [None if np.isnan(e) else int(e) for e in self.beta_errors],
            "w_out": None if self.readout is None else self.readout.w_out.tolist(),
        }


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def best_index(scores: Sequence[float], betas: Sequence[float]) -> Optional[int]:
    """Index of the smallest finite score; ties go to the larger beta."""
    best = None
    for i, (s, b) in enumerate(zip(scores, betas)):
        if not math.isfinite(s):
            continue
        if best is None or s < scores[best] or (s == scores[best] and b > betas[best]):
            best = i
    return best


class CrossValidation:
    """Cross-validates one reservoir over a plan; see :func:`cross_validate`."""

    def __init__(self, data: TaskData, plan: SplitPlan, config: ReservoirConfig,
                 beta_grid, backend: str = "small_k", weights: Optional[ReservoirWeights] = None,
                 memory: str = "store", aggregation: str = "last_state",
                 impl: Optional[str] = None):
        if backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")
        if plan.trainval_len != data.trainval_len:
            raise ConfigurationError(
                f"plan covers {plan.trainval_len} indices but the data has "
                f"{data.trainval_len} before the test range"
            )
        if config.n_u != data.n_u:
            raise ConfigurationError(f"config.n_u={config.n_u} but data has n_u={data.n_u}")
        self.betas = tuple(float(b) for b in beta_grid)
        if not self.betas:
            raise ConfigurationError("beta grid is empty")
        self.data, self.plan, self.config, self.backend = data, plan, config, backend
        self.memory, self.aggregation, self.impl = memory, aggregation, impl
        self.timer = _Timer()
        t0 = time.perf_counter()
        self.weights = weights if weights is not None else reservoir.generate_weights(config)
        if weights is None:
            self.timer.add("weights", t0)
        self.source = _make_source(data, self.weights, config, impl, aggregation)
        self.results: list[SplitResult] = []
        self.global_stats: Optional[SufficientStatistics] = None
        self.end_state = None

    # each backend yields (split, readouts per beta, val scorer) triples
    def run(self) -> list[SplitResult]:
        if self.backend == "naive":
            self._run_naive()
        else:
            self._run_efficient()
        return self.results

    def _run_efficient(self):
        gp = _GlobalPass(self.source, self.plan, self.memory, self.timer)
        self.global_stats, self.end_state = gp.global_stats, gp.end_state
        large = self.backend == "large_k"
        if large:
            t0 = time.perf_counter()
            for beta in self.betas:
                try:
                    gp.global_stats.inverse(beta)
                except SolverError as exc:
                    logger.debug("no global inverse at beta=%g: %s", beta, exc)
            self.timer.add("solve", t0)
        for i, split in enumerate(self.plan.splits):
            fold = gp.left_out(split, columns_only=large)
            readouts, flags = [], []
            t0 = time.perf_counter()
            for beta in self.betas:
                readouts.append(self._solve_efficient(gp.global_stats, fold, beta, large, flags))
            self.timer.add("solve", t0)
            v_s, v_e = split.val_range
            if self.data.kind == "generative":
                self.results.append(self._score_split(
                    i, split, readouts, flags, warm_state=gp.start_states[v_s]))
            else:
                x_val, y_val = gp.window(v_s, v_e)
                self.results.append(self._score_split(
                    i, split, readouts, flags, x_val=x_val, y_val=y_val))

    def _solve_efficient(self, global_stats, fold, beta, large, flags):
        try:
            if large:
                try:
                    return split_readout_woodbury(global_stats, fold, beta)
                except (WoodburyError, SolverError) as exc:
                    flags.append(f"beta={beta:g}: Woodbury fallback ({exc})")
                    if fold.g_i is None:
                        gram = fold.x_i @ fold.x_i.T
                        fold.g_i = 0.5 * (gram + gram.T)
            readout = split_readout_subtract(global_stats, fold, beta)
            if readout.ill_conditioned:
                flags.append(f"beta={beta:g}: ill-conditioned (cond={readout.condition:.3g})")
            return readout
        except SolverError as exc:
            flags.append(f"beta={beta:g}: {exc}")
            return None

    def _run_naive(self):
        w, T = self.plan.washout, self.plan.trainval_len
        for i, split in enumerate(self.plan.splits):
            t0 = time.perf_counter()
            state = self.source.initial_state()
            if w > 0 and self.source.sequential:
                _, _, state = self.source.run(0, w, state)
            x_all, y_all, end_state = self.source.run(w, T, state)
            self.timer.add("reservoir", t0)
            t0 = time.perf_counter()
            stats = SufficientStatistics.empty(x_all.shape[0], y_all.shape[0])
            for s, e in split.train_segments:
                stats.accumulate(x_all[:, s - w:e - w], y_all[:, s - w:e - w])
            self.timer.add("statistics", t0)
            readouts, flags = [], []
            t0 = time.perf_counter()
            for beta in self.betas:
                try:
                    readout = ridge_readout(stats, beta)
                    if readout.ill_conditioned:
                        flags.append(f"beta={beta:g}: ill-conditioned "
                                     f"(cond={readout.condition:.3g})")
                    readouts.append(readout)
                except SolverError as exc:
                    flags.append(f"beta={beta:g}: {exc}")
                    readouts.append(None)
            self.timer.add("solve", t0)
            v_s, v_e = split.val_range
            if self.data.kind == "generative":
                warm = state if v_s == w else self.source.state_of_column(x_all, v_s - w - 1)
                self.results.append(self._score_split(i, split, readouts, flags, warm_state=warm))
            else:
                self.results.append(self._score_split(
                    i, split, readouts, flags,
                    x_val=x_all[:, v_s - w:v_e - w], y_val=y_all[:, v_s - w:v_e - w]))

    def ensure_global(self):
        """Global statistics and end state; the naive backend computes them on demand."""
        if self.global_stats is None:
            t0 = time.perf_counter()
            w, T = self.plan.washout, self.plan.trainval_len
            state = self.source.initial_state()
            if w > 0 and self.source.sequential:
                _, _, state = self.source.run(0, w, state)
            x_all, y_all, self.end_state = self.source.run(w, T, state)
            self.global_stats = SufficientStatistics.from_blocks(x_all, y_all)
            self.timer.add("retrain_pass", t0)
        return self.global_stats, self.end_state

    def _score_split(self, index, split, readouts, flags, warm_state=None,
                     x_val=None, y_val=None) -> SplitResult:
        t0 = time.perf_counter()
        v_s, v_e = split.val_range
        scores = np.full(len(self.betas), np.inf)
        errors = None
        if self.data.kind == "classification":
            errors = np.full(len(self.betas), np.nan)
        divergent = np.zeros(len(self.betas), dtype=bool)
        for j, readout in enumerate(readouts):
            if readout is None:
                continue
            try:
                if self.data.kind == "generative":
                    score = score_generative(
                        readout, self.weights, self.config, warm_state,
                        self.data.inputs[:, v_s:v_e], self.data.targets[:, v_s:v_e],
                        v_e - v_s, impl=self.impl)
                elif self.data.kind == "output":
                    score = score_output(readout, x_val, y_val)
                else:
                    score = score_classification(readout, x_val, self.data.targets[v_s:v_e],
                                                 self.data.n_classes)
                    errors[j] = score.misclassifications
            except NormalizationError as exc:
                flags.append(f"beta={self.betas[j]:g}: {exc}")
                continue
            scores[j] = score.value if math.isfinite(score.value) else np.inf
            divergent[j] = score.divergent
        self.timer.add("validate", t0)
        best = best_index(scores, self.betas)
        if best is None:
            return SplitResult(index, None, float("inf"), float("nan"), self.betas, scores,
                               readouts, errors, True, flags + ["no usable beta"])
        return SplitResult(index, readouts[best], float(scores[best]), self.betas[best],
                           self.betas, scores, readouts, errors, bool(divergent[best]), flags)


def cross_validate(data: TaskData, plan: SplitPlan, config: ReservoirConfig, beta_grid,
                   backend: str = "small_k", weights: Optional[ReservoirWeights] = None,
                   memory: str = "store", aggregation: str = "last_state",
                   impl: Optional[str] = None) -> list[SplitResult]:
    """Per-split readouts and validation scores for every beta in ``beta_grid``.

    Args:
        backend: ``"naive"`` (re-run and retrain per split), ``"small_k"``
            (statistics subtraction) or ``"large_k"`` (Woodbury downdates).
        memory: ``"store"`` keeps all states of the single pass; ``"rerun"``
            re-runs segments from saved boundary states instead. Both give
            identical results.
        aggregation: sequence summary for classification tasks,
            ``"last_state"`` or ``"mean_state"``.
    """
    return CrossValidation(data, plan, config, beta_grid, backend, weights, memory,
                           aggregation, impl).run()


# ------------------------------------------------------------- final models

def common_beta(results: Sequence[SplitResult]):
    """Beta with the lowest mean validation score across splits.

    Returns ``(beta, mean_score, mean_scores_per_beta)``.
    """
    betas = results[0].betas
    table = np.vstack([r.beta_scores for r in results])
    with np.errstate(invalid="ignore"):
        means = table.mean(axis=0)
    idx = best_index(list(means), betas)
    if idx is None:
        return float("nan"), float("inf"), means
    return betas[idx], float(means[idx]), means


def _usable(results):
    if not results:
        raise FinalizeError("no split results")
    if all(r.divergent for r in results):
        raise FinalizeError("every split diverged")
    usable = [r for r in results if r.readout is not None]
    if not usable:
        raise FinalizeError("no split produced a readout")
    return usable


def _mean_readout(readouts, beta) -> Readout:
    return Readout(w_out=np.mean([r.w_out for r in readouts], axis=0), beta=beta)


def finalize(results: Sequence[SplitResult], method: str,
             global_stats: Optional[SufficientStatistics] = None,
             beta_policy: str = "individual") -> Readout:
    """One deployable readout from the per-split results.

    ``averaged`` averages the split readouts and ``best`` takes the split that
    validated best; under ``beta_policy="individual"`` each split uses its own
    best beta, under ``"common"`` all use the beta best on average.
    ``retrained`` refits ``global_stats`` (the whole training+validation
    region) at the beta best on average.
    """
    usable = _usable(results)
    if beta_policy not in ("individual", "common"):
        raise ContractError(f"unknown beta_policy {beta_policy!r}")
    if method == "retrained":
        if global_stats is None:
            raise ContractError("retraining needs the global statistics")
        beta, _, _ = common_beta(results)
        if not math.isfinite(beta):
            raise FinalizeError("no beta has a finite mean validation score")
        return ridge_readout(global_stats, beta)
    if beta_policy == "individual":
        if method == "averaged":
            return _mean_readout([r.readout for r in usable],
                                 float(np.mean([r.best_beta for r in usable])))
        if method == "best":
            return min(usable, key=lambda r: r.val_score).readout
    else:
        beta, _, _ = common_beta(results)
        if not math.isfinite(beta):
            raise FinalizeError("no beta has a finite mean validation score")
        j = results[0].betas.index(beta)
        at_beta = [r for r in results if r.readouts[j] is not None]
        if method == "averaged":
            return _mean_readout([r.readouts[j] for r in at_beta], beta)
        if method == "best":
            return min(at_beta, key=lambda r: r.beta_scores[j]).readouts[j]
    raise ContractError(f"unknown final method {method!r}")


def ireg_finalize(results: Sequence[SplitResult], mode: str,
                  global_stats: Optional[SufficientStatistics] = None) -> Readout:
    """Final model from individually regularized splits.

    ``averaged`` averages the readouts at each split's own best beta;
    ``retrained`` refits the global statistics at the arithmetic mean of the
    per-split best betas.
    """
    usable = _usable(results)
    if mode == "averaged":
        return finalize(results, "averaged", global_stats, "individual")
    if mode == "retrained":
        if global_stats is None:
            raise ContractError("retraining needs the global statistics")
        return ridge_readout(global_stats, float(np.mean([r.best_beta for r in usable])))
    raise ContractError(f"unknown IReg mode {mode!r}")


def build_final_models(results, global_stats, methods=FINAL_METHODS) -> dict:
    builders = {
        "averaged": lambda: finalize(results, "averaged", global_stats, "individual"),
        "best": lambda: finalize(results, "best", global_stats, "individual"),
        "retrained": lambda: finalize(results, "retrained", global_stats),
        "averaged_common": lambda: finalize(results, "averaged", global_stats, "common"),
        "ireg_retrained": lambda: ireg_finalize(results, "retrained", global_stats),
    }
    return {m: builders[m]() for m in methods}


# -------------------------------------------------------------------- test

def score_test(data: TaskData, weights: ReservoirWeights, config: ReservoirConfig,
               readout: Readout, end_state, aggregation: str = "last_state",
               impl: Optional[str] = None) -> Score:
    """Score a final readout on the held-out suffix.

    This is the only test entry point, whatever the validation scheme.
    ``end_state`` is the reservoir state after the whole training+validation
    region (ignored for classification).
    """
    start, end = data.test_range
    if data.kind == "generative":
        return score_generative(readout, weights, config, end_state,
                                data.inputs[:, start:end], data.targets[:, start:end],
                                end - start, impl=impl)
    if data.kind == "output":
        x_ext, _ = reservoir.run_states(weights, config, data.inputs[:, start:end],
                                        end_state, impl=impl)
        return score_output(readout, x_ext, data.targets[:, start:end])
    states = reservoir.aggregate_sequences(weights, config, data.inputs[start:end],
                                           aggregation, impl=impl)
    return score_classification(readout, states, data.targets[start:end], data.n_classes)


@dataclass
class EvaluationReport:
    """Validation and test results of one reservoir under one scheme."""

    per_split: list
    mean_val: float
    final_models: dict
    test_scores: dict
    timings: dict
    betas: tuple = ()
    mean_val_by_beta: Optional[np.ndarray] = None
    common_beta: float = float("nan")
    common_val: float = float("inf")
    test_errors: dict = field(default_factory=dict)
    test_divergent: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    scheme: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self, include_splits: bool = True) -> dict:
        out = {
            "scheme": self.scheme,
            "config": self.config,
            "betas": list(self.betas),
            "mean_val": _json_float(self.mean_val),
            "common_beta": self.common_beta,
            "common_val": _json_float(self.common_val),
            "mean_val_by_beta": None if self.mean_val_by_beta is None else
            [_json_float(v) for v in self.mean_val_by_beta],
            "test_scores": {k: _json_float(v) for k, v in self.test_scores.items()},
            "test_errors": dict(self.test_errors),
            "test_divergent": dict(self.test_divergent),
            "final_betas": {k: r.beta for k, r in self.final_models.items()},
            "timings_ms": dict(self.timings),
            "flags": list(self.flags),
        }
        if include_splits:
            out["per_split"] = [r.to_dict() for r in self.per_split]
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def csv_rows(self, gap_variant: str = "") -> list[dict]:
        """Flat rows: scheme, gap variant, final method, validation, test."""
        return [
            {"scheme": self.scheme, "gap_variant": gap_variant, "final": method,
             "val": self.mean_val, "test": score,
             "errors": self.test_errors.get(method, "")}
            for method, score in self.test_scores.items()
        ]


def evaluate(data: TaskData, plan: SplitPlan, config: ReservoirConfig, beta_grid,
             backend: str = "small_k", weights: Optional[ReservoirWeights] = None,
             methods=FINAL_METHODS, memory: str = "store",
             aggregation: str = "last_state", impl: Optional[str] = None) -> EvaluationReport:
    """Cross-validate, build the final models and score each on the test range."""
    cv = CrossValidation(data, plan, config, beta_grid, backend, weights, memory,
                         aggregation, impl)
    results = cv.run()
    cv.ensure_global()
    flags = [f"split {r.split_index}: {f}" for r in results for f in r.flags]
    beta_c, common_val, means = common_beta(results)
    finals, tests, errors, divergent = {}, {}, {}, {}
    t0 = time.perf_counter()
    for method in methods:
        try:
            finals[method] = build_final_models(results, cv.global_stats, [method])[method]
        except (FinalizeError, SolverError) as exc:
            flags.append(f"final {method}: {exc}")
            continue
        try:
            score = score_test(data, cv.weights, config, finals[method], cv.end_state,
                               aggregation, impl=impl)
        except NormalizationError as exc:
            flags.append(f"test {method}: {exc}")
            continue
        tests[method] = score.value
        divergent[method] = score.divergent
        if score.misclassifications is not None:
            errors[method] = score.misclassifications
    cv.timer.add("test", t0)
    return EvaluationReport(
        per_split=results,
        mean_val=float(np.mean([r.val_score for r in results])),
        final_models=finals,
        test_scores=tests,
        timings=dict(cv.timer.ms),
        betas=cv.betas,
        mean_val_by_beta=means,
        common_beta=beta_c,
        common_val=common_val,
        test_errors=errors,
        test_divergent=divergent,
        flags=flags,
        scheme=plan.spec.label if plan.spec else "",
        config=config.to_dict(),
    )
