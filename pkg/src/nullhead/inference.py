"""Closed-form hyperplane classifier on top of a trained extractor, plus evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError
from .head import HeadState
from .linalg import RANK_TOL, as_matrix, pinv
from .scatter import LabeledBatch, class_means, fisher_trace_ratio


@dataclass(frozen=True)
class ClassifierModel:
    """Linear discriminant ``beta_k(t) = t^T S mu_k - mu_k^T S mu_k / 2`` with ``S = pinv(P P^T)``."""

    class_means: np.ndarray
    projection: np.ndarray
    sigma_pinv: np.ndarray
    class_count: int

    def __post_init__(self):
        # constant per-class terms, cached for scoring
        weights = self.sigma_pinv @ self.class_means
        offsets = 0.5 * np.einsum("dk,dk->k", self.class_means, weights)
        object.__setattr__(self, "_weights", weights)
        object.__setattr__(self, "_offsets", offsets)

    @property
    def dim(self) -> int:
        return self.class_means.shape[0]

    def scores(self, features) -> np.ndarray:
        """C x N matrix of ``beta_k`` for the columns of ``features``."""
        t = np.asarray(features, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.shape[0] != self.dim:
            raise DimensionError(f"expected {self.dim}-dim features, got {t.shape[0]}")
        return self._weights.T @ t - self._offsets[:, None]


def fit(train_features, labels, head_state: HeadState, tol_rel: float = RANK_TOL) -> ClassifierModel:
    """Class means over the whole training set plus ``pinv(P P^T)`` from ``head_state``."""
    num_classes = head_state.num_classes
    batch = LabeledBatch(as_matrix(train_features, "train_features"), labels, num_classes)
    counts = batch.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"training features have no samples of classes {missing}")
    projection = head_state.projection
    if projection.shape[0] != batch.dim:
        raise DimensionError(
            f"projection is {projection.shape}, features have dimension {batch.dim}"
        )
    sigma = projection @ projection.T
    sigma_pinv = pinv(sigma, tol_rel)
    return ClassifierModel(
        class_means=class_means(batch),
        projection=projection,
        sigma_pinv=0.5 * (sigma_pinv + sigma_pinv.T),
        class_count=num_classes,
    )


def classify(model, t) -> int:
    """Index of the highest score; the lowest index wins ties."""
    return int(np.argmax(model.scores(t)[:, 0]))


def predict(model, features) -> np.ndarray:
    return np.argmax(model.scores(features), axis=0)


@dataclass
class EvalReport:
    accuracy: float
    top_k_errors: dict[int, float]
    fisher_trace_ratio: float
    confusion: np.ndarray
    inference_seconds_per_batch: float
    num_samples: int
    extra: dict = field(default_factory=dict)
    feature_seconds_per_batch: float | None = None

    CSV_FIELDS = ("num_samples", "accuracy", "fisher_trace_ratio", "inference_seconds_per_batch")

    def csv_header(self) -> list[str]:
        ks = [f"top{k}_error" for k in sorted(self.top_k_errors)]
        return list(self.CSV_FIELDS[:3]) + ks + list(self.extra) + [self.CSV_FIELDS[3]]

    def csv_row(self) -> list[str]:
        vals = [self.num_samples, self.accuracy, self.fisher_trace_ratio]
        vals += [self.top_k_errors[k] for k in sorted(self.top_k_errors)]
        vals += list(self.extra.values()) + [self.inference_seconds_per_batch]
        return [fmt(v) for v in vals]

    def summary(self, include_timing: bool = True) -> str:
        lines = [
            f"samples                 {self.num_samples}",
            f"accuracy                {self.accuracy:.4f}",
        ]
        lines += [f"{f'top-{k} error':<24}{e:.4f}" for k, e in sorted(self.top_k_errors.items())]
        lines.append(f"fisher trace ratio      {self.fisher_trace_ratio:.6g}")
        for key, val in self.extra.items():
            lines.append(f"{key:<24}{val}")
        if include_timing:
            lines.append(f"inference s/batch       {self.inference_seconds_per_batch:.3g}")
            if self.feature_seconds_per_batch is not None:
                lines.append(f"features s/batch        {self.feature_seconds_per_batch:.3g}")
        lines.append("confusion (rows = true, cols = predicted):")
        lines += ["  " + " ".join(f"{c:5d}" for c in row) for row in self.confusion]
        return "\n".join(lines)


def fmt(value) -> str:
    """Round-trippable text for CSV cells."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def evaluate(model, test_features, labels, k_list=(1, 5), batch_size: int = 128) -> EvalReport:
    """Accuracy, top-k errors, confusion matrix and trace ratio on a labelled feature set.

    ``model`` is anything with ``scores(features) -> C x N`` (a
    :class:`ClassifierModel` or the softmax baseline head). Only the scoring
    loop is timed.
    """
    features = as_matrix(test_features, "test_features")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise DataError("empty test set")
    if features.shape[1] != n:
        raise DimensionError(f"{features.shape[1]} feature columns for {n} labels")
    chunks = []
    n_batches = 0
    start = time.perf_counter()
    for lo in range(0, n, batch_size):
        chunks.append(model.scores(features[:, lo : lo + batch_size]))
        n_batches += 1
    elapsed = time.perf_counter() - start
    scores = np.concatenate(chunks, axis=1)
    num_classes = scores.shape[0]

    order = np.argsort(-scores, axis=0, kind="stable")
    rank_of_true = np.argmax(order == labels[None, :], axis=0)
    top_k = {int(k): float(np.mean(rank_of_true >= k)) for k in k_list}
    pred = order[0]
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalReport(
        accuracy=float(np.mean(pred == labels)),
        top_k_errors=top_k,
        fisher_trace_ratio=fisher_trace_ratio(features, labels, num_classes),
        confusion=confusion,
        inference_seconds_per_batch=elapsed / n_batches,
        num_samples=n,
    )
