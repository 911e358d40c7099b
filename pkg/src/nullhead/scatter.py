"""Class/global centering and the within, total and between scatter matrices.

Features are stored one sample per column (D x N). Every scatter matrix is
D x D and normalized once by ``1/N``::

    S_w = F_w F_w^T / N      S_t = F_t F_t^T / N      S_b = S_t - S_w
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DimensionError
from .linalg import as_matrix


@dataclass(frozen=True)
class LabeledBatch:
    """Feature matrix (D x N) with one integer class label per column."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = as_matrix(self.features, "features")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != features.shape[1]:
            raise DimensionError(
                f"expected {features.shape[1]} labels for features of shape "
                f"{features.shape}, got labels of shape {labels.shape}"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DimensionError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DimensionError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @classmethod
    def from_arrays(cls, features, labels, num_classes: int | None = None) -> "LabeledBatch":
        labels = np.asarray(labels)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        return cls(features, labels, num_classes)

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def size(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ScatterSet:
    s_w: np.ndarray
    s_t: np.ndarray
    s_b: np.ndarray
    class_means: np.ndarray
    global_mean: np.ndarray
    class_counts: np.ndarray


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def class_means(batch: LabeledBatch) -> np.ndarray:
    """D x C matrix of per-class means; columns of absent classes are zero."""
    counts = batch.class_counts()
    sums = batch.features @ _one_hot(batch.labels, batch.num_classes)
    return sums / np.maximum(counts, 1)


def check_class_sizes(batch: LabeledBatch, minimum: int = 2) -> None:
    counts = batch.class_counts()
    short = np.flatnonzero(counts < minimum)
    if short.size:
        detail = ", ".join(f"class {c}: {counts[c]}" for c in short)
        raise DegenerateBatchError(
            f"every class needs at least {minimum} samples per batch ({detail})"
        )


def center_within(batch: LabeledBatch) -> np.ndarray:
    """Subtract from each column the mean of its own class."""
    check_class_sizes(batch)
    return batch.features - class_means(batch)[:, batch.labels]


def center_total(batch: LabeledBatch) -> np.ndarray:
    """Subtract the global mean from every column."""
    if batch.size == 0:
        raise DegenerateBatchError("empty batch")
    return batch.features - batch.features.mean(axis=1, keepdims=True)


def _gram(f: np.ndarray) -> np.ndarray:
    s = (f @ f.T) / f.shape[1]
    return 0.5 * (s + s.T)


def scatters(batch: LabeledBatch) -> ScatterSet:
    f_w = center_within(batch)
    f_t = center_total(batch)
    s_w = _gram(f_w)
    s_t = _gram(f_t)
    return ScatterSet(
        s_w=s_w,
        s_t=s_t,
        s_b=s_t - s_w,
        class_means=class_means(batch),
        global_mean=batch.features.mean(axis=1),
        class_counts=batch.class_counts(),
    )


def fisher_trace_ratio(features, labels, num_classes: int | None = None) -> float:
    """``tr(S_w) / tr(S_t)`` of a labelled feature set.

    Zero means every class has collapsed onto its mean. Singleton classes are
    allowed here (they contribute no within-class scatter). Returns NaN when
    all features coincide.
    """
    batch = LabeledBatch.from_arrays(features, labels, num_classes)
    f_w = batch.features - class_means(batch)[:, batch.labels]
    f_t = batch.features - batch.features.mean(axis=1, keepdims=True)
    tr_t = float(np.sum(f_t * f_t))
    if tr_t == 0.0:
        return float("nan")
    return float(np.sum(f_w * f_w)) / tr_t
