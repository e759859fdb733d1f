"""Dataset loaders and trainval-only normalization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import TaskData
from .exceptions import DataFormatError, NormalizationError

# utterances per speaker, in file order
VOWELS_TRAIN_SIZES = (30,) * 9
VOWELS_TEST_SIZES = (31, 35, 88, 44, 29, 24, 40, 50, 29)
VOWELS_N_COEFFS = 12


@dataclass
class SeriesDataset:
    """A continuous series ``values`` (n_dims, T), optionally with paired targets.

    ``normalization`` records the method and the per-dimension ``shift`` and
    ``scale`` so that ``original = normalized * scale + shift``.
    """

    values: np.ndarray
    name: str = ""
    test_len: int = 0
    washout: int = 0
    targets: Optional[np.ndarray] = None
    normalization: dict = field(default_factory=lambda: {"method": "none"})

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.targets is not None:
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
            if self.targets.shape[1] != self.length:
                raise DataFormatError("targets and values differ in length")
        if self.test_len < 0 or self.washout < 0:
            raise DataFormatError("test_len and washout must be >= 0")
        if self.length <= self.test_len + self.washout:
            raise DataFormatError(
                f"series of length {self.length} cannot hold test {self.test_len} "
                f"and washout {self.washout}"
            )

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def trainval_end(self) -> int:
        return self.length - self.test_len

    def denormalize(self, values) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if self.normalization["method"] == "none":
            return values.copy()
        shift = np.asarray(self.normalization["shift"])[:, None]
        scale = np.asarray(self.normalization["scale"])[:, None]
        return values * scale + shift

    def to_task(self, kind: str = "generative") -> TaskData:
        """Wrap as :class:`TaskData`; ``output`` tasks need paired targets."""
        if kind == "generative":
            return TaskData.generative(self.values, self.test_len, name=self.name)
        if kind == "output":
            if self.targets is None:
                raise DataFormatError("an output task needs paired targets")
            return TaskData.output(self.values, self.targets, self.test_len, name=self.name)
        raise DataFormatError(f"series datasets support generative/output tasks, not {kind!r}")


@dataclass
class SequenceDataset:
    """Labelled sequences, each (n_u, L_s), with labels in ``1..n_classes``."""

    train_sequences: list
    train_labels: np.ndarray
    test_sequences: list
    test_labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        for part in ("train", "test"):
            seqs, labels = getattr(self, f"{part}_sequences"), getattr(self, f"{part}_labels")
            labels = np.asarray(labels, dtype=int)
            setattr(self, f"{part}_labels", labels)
            if len(seqs) != len(labels):
                raise DataFormatError(f"{part}: {len(seqs)} sequences but {len(labels)} labels")
            if labels.size and (labels.min() < 1 or labels.max() > self.n_classes):
                raise DataFormatError(f"{part}: labels outside [1, {self.n_classes}]")
            if any(np.shape(s)[1] < 1 for s in seqs):
                raise DataFormatError(f"{part}: empty sequence")

    def class_counts(self, part: str = "train") -> np.ndarray:
        labels = getattr(self, f"{part}_labels")
        return np.bincount(labels, minlength=self.n_classes + 1)[1:]

    def to_task(self, kind: str = "classification") -> TaskData:
        if kind != "classification":
            raise DataFormatError(f"sequence datasets only support classification, not {kind!r}")
        return TaskData.classification(self.train_sequences, self.train_labels,
                                       self.test_sequences, self.test_labels,
                                       self.n_classes, name=self.name)


def _read_rows(path) -> list[tuple[int, list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        return [(i, row) for i, row in enumerate(csv.reader(fh), start=1)]


def _parse(cell: str, path, line: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataFormatError(f"{path}:{line}: cannot parse {cell.strip()!r} as a number") from None
    if not math.isfinite(value):
        raise DataFormatError(f"{path}:{line}: non-finite value {cell.strip()!r}")
    return value


def _numeric_rows(path, n_columns: int) -> np.ndarray:
    rows = _read_rows(path)
    out = []
    for k, (line, row) in enumerate(rows):
        if not row or all(not c.strip() for c in row):
            raise DataFormatError(f"{path}:{line}: blank row")
        if len(row) != n_columns:
            raise DataFormatError(f"{path}:{line}: expected {n_columns} column(s), got {len(row)}")
        if k == 0:
            try:
                [float(c) for c in row]
            except ValueError:
                continue  # header
        out.append([_parse(c, path, line) for c in row])
    if not out:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(out)


def load_univariate_csv(path, test_len: int = 0, washout: int = 0,
                        name: Optional[str] = None) -> SeriesDataset:
    """One numeric value per row; a non-numeric first row is taken as a header.

    Raises:
        DataFormatError: naming the line of the first bad row.
    """
    values = _numeric_rows(path, 1)[:, 0]
    return SeriesDataset(values[None, :], name or Path(path).stem, test_len, washout)


def load_paired_csv(path, test_len: int = 0, washout: int = 0,
                    name: Optional[str] = None) -> SeriesDataset:
    """Two numeric columns: input ``u(n)`` then target ``y(n)``."""
    table = _numeric_rows(path, 2)
    return SeriesDataset(table[:, 0][None, :], name or Path(path).stem, test_len, washout,
                         targets=table[:, 1][None, :])


def triangular_targets(length: int, events: Sequence[int], width: int = 5) -> np.ndarray:
    """Target that is 1 at each event and fades linearly to 0 ``width`` steps away.

    Overlapping ramps are merged by their pointwise maximum.
    """
    n = np.arange(length)
    target = np.zeros(length)
    for e in events:
        target = np.maximum(target, np.clip(1.0 - np.abs(n - e) / width, 0.0, None))
    return target


def read_vowel_blocks(path, n_coeffs: int = VOWELS_N_COEFFS) -> list[np.ndarray]:
    """Blocks of whitespace-separated rows separated by blank lines.

    Each block becomes an (n_coeffs, L) array.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    blocks, current = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                if current:
                    blocks.append(np.array(current).T)
                    current = []
                continue
            if len(parts) != n_coeffs:
                raise DataFormatError(
                    f"{path}:{line_no}: expected {n_coeffs} coefficients, got {len(parts)}"
                )
            current.append([_parse(p, path, line_no) for p in parts])
    if current:
        blocks.append(np.array(current).T)
    return blocks


def _labels_from_sizes(n_blocks: int, sizes: Sequence[int], path) -> np.ndarray:
    if n_blocks != sum(sizes):
        raise DataFormatError(f"{path}: {n_blocks} blocks, expected {sum(sizes)}")
    return np.repeat(np.arange(1, len(sizes) + 1), sizes)


def load_japanese_vowels(train_path, test_path, train_sizes=VOWELS_TRAIN_SIZES,
                         test_sizes=VOWELS_TEST_SIZES) -> SequenceDataset:
    """Speaker-labelled utterances from the benchmark's ASCII block files.

    Labels follow block position: the first ``sizes[0]`` blocks are speaker 1
    and so on.
    """
    train = read_vowel_blocks(train_path)
    test = read_vowel_blocks(test_path)
    return SequenceDataset(
        train, _labels_from_sizes(len(train), train_sizes, train_path),
        test, _labels_from_sizes(len(test), test_sizes, test_path),
        n_classes=len(train_sizes), name="japanese_vowels",
    )


def normalize(dataset: SeriesDataset, method: str = "none") -> SeriesDataset:
    """Rescale every value with statistics of the trainval prefix only.

    ``zscore`` centers to zero mean and unit (population) variance; ``minmax``
    maps the trainval range to [0, 1]. Test values may fall outside.

    Raises:
        NormalizationError: if the trainval part is constant in a dimension.
    """
    if method == "none":
        return replace(dataset, values=dataset.values.copy(),
                       normalization={"method": "none"})
    trainval = dataset.values[:, :dataset.trainval_end]
    if method == "zscore":
        shift, scale = trainval.mean(axis=1), trainval.std(axis=1)
    elif method == "minmax":
        shift = trainval.min(axis=1)
        scale = trainval.max(axis=1) - shift
    else:
        raise NormalizationError(f"unknown normalization {method!r}")
    if np.any(scale == 0):
        raise NormalizationError(f"{method}: trainval part is constant")
    values = (dataset.values - shift[:, None]) / scale[:, None]
    return replace(dataset, values=values, normalization={
        "method": method, "shift": shift.tolist(), "scale": scale.tolist(),
    })
