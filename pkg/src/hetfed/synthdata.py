"""Two-class Gaussian toy data: every feature ~ N(mean_c, std**2) for class c."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .mlp import Dataset
from .numfmt import F64, ScalarFormat
from .rng import SplitMix64, derive_seed

TRAIN_STREAM, VAL_STREAM, TEST_STREAM = 0, 1, 2


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 1000
    n_val: int = 1000
    n_test: int = 1000
    features: int = 5
    mean0: float = -1.0
    mean1: float = 1.0
    std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "features"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.std > 0:
            raise ValueError(f"std must be > 0, got {self.std}")

    def to_dict(self) -> dict:
        return asdict(self)


def balanced_labels(n: int) -> np.ndarray:
    """Alternating 1, 0, 1, 0, ...; class 1 takes the extra sample when n is odd."""
    return (np.arange(n) % 2 == 0).astype(np.float64)


def gaussian_set(n: int, spec: DataSpec, seed: int, fmt: ScalarFormat = F64) -> Dataset:
    """``n`` samples drawn from one stream, sample-major, feature-minor."""
    labels = balanced_labels(n)
    z = SplitMix64(seed).normal(n * spec.features).reshape(n, spec.features)
    means = np.where(labels[:, None] == 1.0, spec.mean1, spec.mean0)
    return Dataset.from_arrays(means + spec.std * z, labels, fmt)


def generate(spec: DataSpec, fmt: ScalarFormat = F64) -> tuple[Dataset, Dataset, Dataset]:
    """Train, validation and test sets, each from its own derived stream."""
    return (
        gaussian_set(spec.n_train, spec, derive_seed(spec.seed, TRAIN_STREAM), fmt),
        gaussian_set(spec.n_val, spec, derive_seed(spec.seed, VAL_STREAM), fmt),
        gaussian_set(spec.n_test, spec, derive_seed(spec.seed, TEST_STREAM), fmt),
    )


def write_csv(data: Dataset, path: Path) -> None:
    x = data.features.values.astype(np.float64)
    y = data.labels.values.astype(np.float64).ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(data.d)] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path: Path, fmt: ScalarFormat = F64) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    return Dataset.from_arrays(body[:, :-1], body[:, -1], fmt)
