"""Dataset ingestion, splitting, scaling and the synthetic bimodal generator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "cal", "calval", "test")
# cumulative cut points in tenths; test takes the remainder
CUTS_TENTHS = (5, 6, 7, 8)
# Fixed seed for test membership; independent of every run seed.
TEST_BASE_SEED = 20240229


class DataError(ValueError):
    pass


@dataclass
class RawDataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    target_name: str = "y"


def load_csv(path, target_column: str) -> RawDataset:
    """Read a numeric CSV with one header row."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not in header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            values = []
            for col, cell in zip(header, row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col!r}: non-numeric cell {cell!r}") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    j = header.index(target_column)
    features = [h for i, h in enumerate(header) if i != j]
    return RawDataset(np.delete(data, j, axis=1), data[:, j].copy(), features, target_column)


def write_csv(raw: RawDataset, path) -> None:
    names = raw.feature_names or [f"x{i}" for i in range(raw.X.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + [raw.target_name])
        for xi, yi in zip(raw.X, raw.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def synthetic_bimodal(count: int = 2000, seed: int = 0) -> RawDataset:
    """Heteroscedastic two-mode data: y = +/- (0.1 + x * U)."""
    if count < 2:
        raise DataError("need at least 2 points")
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, count)
    u = rng.uniform(0.0, 1.0, count)
    sign = rng.integers(0, 2, count)
    sigma = 0.1 + x * u
    y = np.where(sign == 1, sigma, -sigma)
    return RawDataset(x[:, None], y, ["x"], "y")


def split_sizes(n: int) -> dict[str, int]:
    cuts = [n * c // 10 for c in CUTS_TENTHS]
    sizes = np.diff([0] + cuts).tolist() + [n - cuts[-1]]
    return dict(zip(SPLITS, sizes))


def assign_splits(n: int, seed: int) -> np.ndarray:
    """Split label per row.  Test rows depend only on ``n``."""
    sizes = split_sizes(n)
    if min(sizes.values()) < 1:
        raise DataError(f"{n} rows cannot populate every split: {sizes}")
    labels = np.empty(n, dtype=object)
    base = np.random.default_rng(TEST_BASE_SEED).permutation(n)
    test_rows = np.sort(base[: sizes["test"]])
    labels[test_rows] = "test"
    rest = np.sort(base[sizes["test"]:])
    rest = rest[np.random.default_rng(seed).permutation(rest.size)]
    start = 0
    for name in SPLITS[:-1]:
        labels[rest[start:start + sizes[name]]] = name
        start += sizes[name]
    return labels.astype(str)


@dataclass
class DatasetBundle:
    X: np.ndarray          # standardized covariates
    y: np.ndarray          # min-max scaled targets (unclamped)
    y_raw: np.ndarray
    split: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_min: float
    y_max: float
    seed: int

    @property
    def y_range(self) -> float:
        return self.y_max - self.y_min

    def rows(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return np.flatnonzero(self.split == name)

    def part(self, name: str):
        """(X, scaled y, raw y) for one split."""
        r = self.rows(name)
        return self.X[r], self.y[r], self.y_raw[r]

    def scale_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_min) / self.y_range

    def unscale_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_range + self.y_min

    def clamped(self, name: str):
        """Scaled targets of a split clamped into [0, 1], plus the clamp count."""
        y = self.part(name)[1]
        c = np.clip(y, 0.0, 1.0)
        return c, int(np.sum(c != y))

    def scaler(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_min": self.y_min, "y_max": self.y_max}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"seed": self.seed, "split": self.split.tolist(),
                                          **self.scaler()}))


def preprocess(raw: RawDataset, seed: int = 0) -> DatasetBundle:
    """Split, then standardize x and min-max scale y with train statistics."""
    n = len(raw.y)
    if n < 10:
        raise DataError(f"need at least 10 rows, got {n}")
    split = assign_splits(n, seed)
    train = split == "train"
    X = np.asarray(raw.X, dtype=np.float64)
    mean = X[train].mean(axis=0)
    std = X[train].std(axis=0)  # population std
    std = np.where(std > 0, std, 1.0)
    y_raw = np.asarray(raw.y, dtype=np.float64)
    y_min, y_max = float(y_raw[train].min()), float(y_raw[train].max())
    if not y_max > y_min:
        raise DataError("train targets are constant; cannot scale")
    Xs = (X - mean) / std
    ys = (y_raw - y_min) / (y_max - y_min)
    n_out = int(np.sum((ys[~train] < 0) | (ys[~train] > 1)))
    if n_out:
        log.info("%d non-train targets fall outside the train range", n_out)
    return DatasetBundle(Xs, ys, y_raw, split, mean, std, y_min, y_max, seed)
