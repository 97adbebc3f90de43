"""Datasets: the indexed example store, synthetic generators, and CSV ingestion.

A dataset is an immutable table of ``n`` examples. Batching always refers to
example indices (0-based), never to copied rows, so index identity is stable
for the lifetime of a run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "gaussian_clusters",
    "gaussian_cluster_split",
    "load_csv",
    "save_csv",
]


@dataclass(frozen=True)
class Dataset:
    """Indexed examples: a float feature matrix and a target per row.

    Integer targets mark a classification dataset (class indices); float
    targets mark regression.
    """

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        targs = np.asarray(self.targets)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D (n, k), got shape {feats.shape}")
        if targs.ndim != 1 or targs.shape[0] != feats.shape[0]:
            raise ValueError(
                f"targets must be 1-D with one entry per example, got shape "
                f"{targs.shape} for {feats.shape[0]} examples"
            )
        if feats.shape[0] == 0:
            raise ValueError("dataset must contain at least one example")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if np.issubdtype(targs.dtype, np.integer):
            targs = np.ascontiguousarray(targs, dtype=np.int64)
        else:
            targs = np.ascontiguousarray(targs, dtype=np.float64)
            if not np.all(np.isfinite(targs)):
                raise ValueError("targets contain non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)

    @property
    def n_classes(self) -> int:
        if not self.is_classification:
            raise ValueError("regression dataset has no classes")
        return int(self.targets.max()) + 1


def gaussian_clusters(
    n: int,
    dim: int,
    separation: float = 3.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Two isotropic Gaussian clusters with optional label flipping.

    Cluster means sit at +-mu along the all-ones direction with
    ``||mu_1 - mu_0|| = separation``, unit covariance, balanced classes.
    ``label_noise`` is the probability of flipping each label after sampling
    (flipped labels make memorization measurable on the test side).
    """
    if n < 2:
        raise ValueError("need at least 2 examples")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    mu = (separation / 2.0) * np.ones(dim) / np.sqrt(dim)
    signs = np.where(labels == 1, 1.0, -1.0)[:, None]
    feats = signs * mu[None, :] + rng.standard_normal((n, dim))
    if label_noise > 0.0:
        flips = rng.random(n) < label_noise
        labels = np.where(flips, 1 - labels, labels)
    return Dataset(feats, labels.astype(np.int64))


def xor_clusters(
    n: int,
    dim: int,
    separation: float = 3.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Four Gaussian blobs in an XOR layout, labeled by quadrant parity.

    Blob centers sit at (+-h, +-h) in the first two feature dimensions with
    h = separation / 2 (adjacent centers are ``separation`` apart); the label
    is 1 where the center signs agree. Remaining dimensions are pure noise.
    The boundary is not linearly separable, so the class structure is learned
    slowly relative to label memorization; that makes regularization effects
    visible at small dataset sizes, unlike the two-cluster task whose test
    accuracy saturates almost immediately.
    """
    if n < 2:
        raise ValueError("need at least 2 examples")
    if dim < 2:
        raise ValueError("xor clusters need at least 2 feature dimensions")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    h = separation / 2.0
    quadrant = rng.integers(0, 4, size=n)
    sign_x = np.where(quadrant % 2 == 0, 1.0, -1.0)
    sign_y = np.where(quadrant // 2 == 0, 1.0, -1.0)
    labels = (sign_x * sign_y > 0).astype(np.int64)
    feats = rng.standard_normal((n, dim))
    feats[:, 0] += h * sign_x
    feats[:, 1] += h * sign_y
    if label_noise > 0.0:
        flips = rng.random(n) < label_noise
        labels = np.where(flips, 1 - labels, labels).astype(np.int64)
    return Dataset(feats, labels)


def _split_stream(full: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    train = Dataset(full.features[:n_train], full.targets[:n_train])
    test = Dataset(full.features[n_train:], full.targets[n_train:])
    return train, test


def gaussian_cluster_split(
    n_train: int,
    n_test: int,
    dim: int,
    separation: float = 3.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Draw one stream of examples and split it into train/test datasets."""
    full = gaussian_clusters(n_train + n_test, dim, separation, label_noise, seed)
    return _split_stream(full, n_train)


def xor_cluster_split(
    n_train: int,
    n_test: int,
    dim: int,
    separation: float = 3.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Split one :func:`xor_clusters` stream into train/test datasets."""
    full = xor_clusters(n_train + n_test, dim, separation, label_noise, seed)
    return _split_stream(full, n_train)


def _expected_header(k: int) -> list[str]:
    return [f"feature_{i}" for i in range(k)] + ["target"]


def load_csv(path: str | Path) -> Dataset:
    """Read a dataset from CSV with header ``feature_0,...,feature_{k-1},target``.

    Targets that are all integral become class indices; otherwise regression
    reals.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        k = len(header) - 1
        if k < 1 or header != _expected_header(k):
            raise ValueError(
                f"{path}: bad header {header!r}; expected "
                f"feature_0,...,feature_{{k-1}},target"
            )
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    if data.shape[1] != k + 1:
        raise ValueError(f"{path}: row width does not match header")
    feats, targs = data[:, :k], data[:, k]
    if np.all(targs == np.round(targs)):
        return Dataset(feats, targs.astype(np.int64))
    return Dataset(feats, targs)


def save_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(dataset.n_features))
        for i in range(dataset.n):
            writer.writerow(
                [repr(float(x)) for x in dataset.features[i]]
                + [repr(dataset.targets[i].item())]
            )
