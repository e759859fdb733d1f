"""Training/validation split plans for the six validation schemes.

Indices are time steps (or sequences) of the training+validation region
``[0, trainval_len)``; the first ``washout`` of them are never trained or
validated on. All ranges are half-open ``(start, end)`` pairs.

Schemes: ``SV`` single validation at the end, ``CV`` cross-validation,
``AV`` accumulative (train on everything before the window) and ``FV``
walk-forward (train on a fixed-length window right before it). Validation
windows are either ``k_fold`` (equal non-overlapping folds) or ``k_step``
(windows of ``val_len`` moved by a constant step, the last one flush with
the end of the region).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

from .exceptions import PlanningError

SCHEMES = ("SV", "CV", "AV", "FV")
FOLDINGS = ("k_fold", "k_step")
GAPS = ("none", "before", "after", "both")
GAP_LABELS = {"none": "V", "before": "_V", "after": "V_", "both": "_V_"}

Range = tuple[int, int]


@dataclass(frozen=True)
class SchemeSpec:
    """Validation scheme parameters.

    ``min_ratio`` is the share of the training+validation length reserved
    before the first AV/FV window, and also the FV training length. ``gap_len``
    defaults to the validation window length.
    """

    scheme: str
    folding: str = "k_fold"
    k: int = 1
    val_len: Optional[int] = None
    min_ratio: Optional[float] = None
    gap: str = "none"
    gap_len: Optional[int] = None

    def __post_init__(self):
        problem = self.problem()
        if problem:
            raise PlanningError(problem)

    def problem(self) -> Optional[str]:
        if self.scheme not in SCHEMES:
            return f"scheme must be one of {SCHEMES}, got {self.scheme!r}"
        if self.folding not in FOLDINGS:
            return f"folding must be one of {FOLDINGS}, got {self.folding!r}"
        if self.gap not in GAPS:
            return f"gap must be one of {GAPS}, got {self.gap!r}"
        if self.k < 1:
            return f"k must be >= 1, got {self.k}"
        if self.scheme == "SV":
            if self.k != 1:
                return f"SV has exactly one split, got k={self.k}"
            if self.val_len is None or self.val_len < 1:
                return "SV needs val_len >= 1"
        if self.scheme == "CV" and self.folding == "k_fold" and self.k < 2:
            return f"k-fold CV needs k >= 2, got {self.k}"
        if self.scheme in ("AV", "FV"):
            if self.min_ratio is None or not 0.0 < self.min_ratio < 1.0:
                return f"{self.scheme} needs min_ratio in (0, 1), got {self.min_ratio}"
        if self.folding == "k_step" and (self.val_len is None or self.val_len < 1):
            return "k_step folding needs val_len >= 1"
        if self.gap_len is not None and self.gap_len < 0:
            return f"gap_len must be >= 0, got {self.gap_len}"
        return None

    @property
    def label(self) -> str:
        """Short name such as ``CV k_fold _V``."""
        folding = "" if self.scheme == "SV" else f" {self.folding}"
        return f"{self.scheme}{folding} {GAP_LABELS[self.gap]}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Split:
    train_segments: tuple[Range, ...]
    val_range: Range
    gap_ranges: tuple[Range, ...] = ()

    @property
    def train_len(self) -> int:
        return sum(e - s for s, e in self.train_segments)

    def train_indices(self) -> set[int]:
        return {i for s, e in self.train_segments for i in range(s, e)}


@dataclass(frozen=True)
class SplitPlan:
    splits: tuple[Split, ...]
    trainval_len: int
    washout: int
    spec: Optional[SchemeSpec] = field(default=None, compare=False)

    def __len__(self):
        return len(self.splits)

    def boundaries(self) -> list[int]:
        """Sorted cut points of all ranges, including ``washout`` and the end."""
        cuts = {self.washout, self.trainval_len}
        for split in self.splits:
            for s, e in (*split.train_segments, split.val_range, *split.gap_ranges):
                cuts.update((s, e))
        return sorted(c for c in cuts if self.washout <= c <= self.trainval_len)

    def to_dict(self) -> dict:
        return {
            "trainval_len": self.trainval_len,
            "washout": self.washout,
            "scheme": self.spec.to_dict() if self.spec else None,
            "splits": [
                {
                    "index": i,
                    "train": [list(r) for r in split.train_segments],
                    "val": list(split.val_range),
                    "gaps": [list(r) for r in split.gap_ranges],
                }
                for i, split in enumerate(self.splits)
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        splits = tuple(
            Split(
                train_segments=tuple(tuple(r) for r in rec["train"]),
                val_range=tuple(rec["val"]),
                gap_ranges=tuple(tuple(r) for r in rec.get("gaps", ())),
            )
            for rec in data["splits"]
        )
        spec = SchemeSpec(**data["scheme"]) if data.get("scheme") else None
        return cls(splits, int(data["trainval_len"]), int(data["washout"]), spec)


def _subtract(ranges: list[Range], cut: Range) -> list[Range]:
    out = []
    cs, ce = cut
    for s, e in ranges:
        if ce <= s or cs >= e:
            out.append((s, e))
            continue
        if s < cs:
            out.append((s, cs))
        if ce < e:
            out.append((ce, e))
    return out


def _clip(r: Range, lo: int, hi: int) -> Optional[Range]:
    s, e = max(r[0], lo), min(r[1], hi)
    return (s, e) if s < e else None


def _windows(spec: SchemeSpec, start: int, end: int) -> list[Range]:
    span = end - start
    if spec.folding == "k_fold":
        size = span // spec.k
        if size < 1:
            raise PlanningError(
                f"{span} indices available after index {start} cannot hold k={spec.k} folds"
            )
        cuts = [start + i * size for i in range(spec.k)] + [end]
        return [(cuts[i], cuts[i + 1]) for i in range(spec.k)]
    val_len = spec.val_len
    if val_len > span:
        raise PlanningError(
            f"validation length {val_len} exceeds the {span} indices available "
            f"after index {start}"
        )
    if spec.k == 1:
        return [(end - val_len, end)]
    step = (span - val_len) // (spec.k - 1)
    if step < 1:
        raise PlanningError(
            f"k={spec.k} windows of length {val_len} do not fit with a positive "
            f"step into {span} indices"
        )
    first = end - val_len - (spec.k - 1) * step
    return [(first + i * step, first + i * step + val_len) for i in range(spec.k)]


def plan_splits(spec: SchemeSpec, trainval_len: int, washout: int = 0) -> SplitPlan:
    """Expand ``spec`` into explicit splits over ``[0, trainval_len)``.

    Raises:
        PlanningError: naming the first geometric constraint that fails.
    """
    if washout < 0:
        raise PlanningError(f"washout must be >= 0, got {washout}")
    if trainval_len < washout + max(spec.k, 2):
        raise PlanningError(
            f"trainval_len {trainval_len} is too short for washout {washout} and k={spec.k}"
        )
    T, w = trainval_len, washout

    if spec.scheme == "SV":
        windows = [(T - spec.val_len, T)]
        if windows[0][0] <= w:
            raise PlanningError(f"SV validation of {spec.val_len} leaves no training data")
    elif spec.scheme == "CV":
        windows = _windows(spec, w, T)
    else:
        reserve = math.ceil(spec.min_ratio * T - 1e-9)
        start = max(w, reserve)
        if start >= T:
            raise PlanningError(
                f"min_ratio {spec.min_ratio} reserves {reserve} of {T} indices and "
                "leaves no room for validation"
            )
        windows = _windows(spec, start, T)
        fixed_len = reserve

    splits = []
    for v_start, v_end in windows:
        gap_len = (v_end - v_start) if spec.gap_len is None else spec.gap_len
        gaps = []
        if spec.gap in ("before", "both") and gap_len > 0:
            gaps.append(_clip((v_start - gap_len, v_start), w, T))
        if spec.gap in ("after", "both") and gap_len > 0:
            gaps.append(_clip((v_end, v_end + gap_len), w, T))
        gaps = [g for g in gaps if g is not None]

        if spec.scheme == "CV":
            train = [(w, T)]
        elif spec.scheme == "FV":
            train = [(max(w, v_start - fixed_len), v_start)]
        else:
            train = [(w, v_start)]
        train = [r for r in train if r[0] < r[1]]
        for cut in [(v_start, v_end), *gaps]:
            train = _subtract(train, cut)
        if not train:
            raise PlanningError(
                f"split validating on [{v_start}, {v_end}) has no training data left"
            )
        splits.append(Split(tuple(train), (v_start, v_end), tuple(gaps)))
    return SplitPlan(tuple(splits), T, w, spec)


def validate_plan(plan: SplitPlan) -> list[str]:
    """List every violated plan invariant; an empty list means the plan is valid."""
    problems = []
    T, w = plan.trainval_len, plan.washout
    if not plan.splits:
        problems.append("plan has no splits")
    for i, split in enumerate(plan.splits):
        named = [("train", r) for r in split.train_segments]
        named += [("val", split.val_range)]
        named += [("gap", r) for r in split.gap_ranges]
        for kind, (s, e) in named:
            if not (0 <= s < e <= T):
                problems.append(f"split {i}: {kind} range [{s}, {e}) outside [0, {T}) or empty")
            elif kind != "gap" and s < w:
                problems.append(f"split {i}: {kind} range [{s}, {e}) overlaps the washout [0, {w})")
        for a in range(len(named)):
            for b in range(a + 1, len(named)):
                (ka, (sa, ea)), (kb, (sb, eb)) = named[a], named[b]
                if max(sa, sb) < min(ea, eb):
                    problems.append(
                        f"split {i}: {ka} [{sa}, {ea}) overlaps {kb} [{sb}, {eb})"
                    )
        if not split.train_segments:
            problems.append(f"split {i}: no training data")
    starts = [split.val_range[0] for split in plan.splits]
    if starts != sorted(starts):
        problems.append("validation ranges are not ordered by start index")

    spec = plan.spec
    if spec and spec.scheme == "CV" and spec.folding == "k_fold" and spec.gap == "none":
        train_hist, val_hist = coverage(plan)
        k = len(plan.splits)
        bad_train = [i for i in range(w, T) if train_hist[i] != k - 1]
        bad_val = [i for i in range(w, T) if val_hist[i] != 1]
        if bad_train:
            problems.append(f"{len(bad_train)} indices not trained on exactly k-1 times")
        if bad_val:
            problems.append(f"{len(bad_val)} indices not validated on exactly once")
    return problems


def coverage(plan: SplitPlan) -> tuple[Counter, Counter]:
    """How many splits train on, and validate on, each index."""
    train_hist, val_hist = Counter(), Counter()
    for split in plan.splits:
        for s, e in split.train_segments:
            train_hist.update(range(s, e))
        val_hist.update(range(*split.val_range))
    return train_hist, val_hist
