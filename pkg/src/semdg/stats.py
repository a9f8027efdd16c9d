"""Online per-class feature statistics feeding the semantic augmentation.

Each class keeps a running count, mean and population covariance (divide by
n, not n-1: the augmentation distribution is a plug-in estimate). Updates
merge batch statistics exactly, so streaming in any chunking reproduces the
two-pass batch result. ClassStats is a value: update() returns a new
instance and never mutates its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ClassStats:
    """Running count, mean and population covariance of one class's features."""

    class_id: int
    count: int
    mean: np.ndarray   # (d,)
    cov: np.ndarray    # (d, d), population covariance

    @staticmethod
    def empty(class_id: int, dim: int) -> "ClassStats":
        return ClassStats(class_id, 0, np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def update(stats: ClassStats, batch: np.ndarray) -> ClassStats:
    """Fold a batch of same-class feature rows into the running statistics.

    Uses the pairwise merge of (count, mean, scatter): exact population
    moments regardless of how samples are chunked.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.ndim != 2 or batch.shape[1] != stats.dim:
        raise InvalidInputError(
            f"batch has shape {batch.shape}, expected (*, {stats.dim})"
        )
    n_new = batch.shape[0]
    if n_new == 0:
        return stats

    mean_new = batch.mean(axis=0)
    centered = batch - mean_new
    scatter_new = centered.T @ centered

    n_old = stats.count
    n = n_old + n_new
    delta = mean_new - stats.mean
    mean = stats.mean + delta * (n_new / n)
    scatter = stats.cov * n_old + scatter_new + np.outer(delta, delta) * (n_old * n_new / n)
    cov = scatter / n
    cov = 0.5 * (cov + cov.T)  # kill roundoff asymmetry
    return ClassStats(stats.class_id, n, mean, cov)


def covariance(stats: ClassStats, ridge: float) -> np.ndarray:
    """Covariance with a ridge on the diagonal; symmetric PSD for ridge >= 0."""
    if ridge < 0:
        raise InvalidInputError("ridge must be non-negative")
    return stats.cov + ridge * np.eye(stats.dim)


def default_ridge(cov: np.ndarray) -> float:
    """Ridge used before sampling from a possibly rank-deficient covariance."""
    return 1e-6 * float(np.trace(cov)) / cov.shape[0]


class CovarianceBank:
    """Immutable per-class covariance snapshot, indexed by class id."""

    def __init__(self, matrices: list[np.ndarray]):
        self._matrices = []
        for m in matrices:
            m = np.array(m, dtype=np.float64, copy=True)
            m.setflags(write=False)
            self._matrices.append(m)

    @property
    def num_classes(self) -> int:
        return len(self._matrices)

    def lookup(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < len(self._matrices):
            raise InvalidInputError(f"class id {class_id} outside bank of size {len(self._matrices)}")
        return self._matrices[class_id]


def snapshot_all(per_class: list[ClassStats]) -> CovarianceBank:
    """Freeze the current covariances of all classes into a bank.

    Entry i must describe class i; classes never updated contribute their
    all-zero covariance.
    """
    for i, st in enumerate(per_class):
        if st.class_id != i:
            raise InvalidInputError(
                f"expected stats for class {i} at position {i}, got class {st.class_id}"
            )
    return CovarianceBank([st.cov for st in per_class])
