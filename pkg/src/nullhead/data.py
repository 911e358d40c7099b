"""Dataset loading, synthetic blobs and stratified batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Inputs with the sample axis last (``D x N`` or ``C x H x W x N``)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    label_map: tuple = field(default=())

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[:-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[..., idx], self.labels[idx], self.num_classes, self.label_map)

    def flattened(self) -> np.ndarray:
        return self.inputs.reshape(-1, self.size)


def _dense_labels(raw: np.ndarray):
    mapping, dense = np.unique(raw, return_inverse=True)
    if mapping.size < 2:
        raise DataError(f"dataset has a single class ({mapping.tolist()})")
    return dense.astype(np.int64), tuple(int(m) for m in mapping)


def load_csv(path) -> Dataset:
    """Read ``label,f0,f1,...`` rows into a D x N dataset.

    Labels are remapped to ``0..C-1`` in sorted order; the original values
    are kept in ``label_map``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    labels, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}:1: header must start with 'label'")
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataError(f"{path}:{line}: expected {width} columns, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    features = np.array(rows, dtype=np.float64).T
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: non-finite feature values")
    dense, mapping = _dense_labels(np.array(labels))
    return Dataset(features, dense, len(mapping), mapping)


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: expected at least 4 header bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: expected {header} header bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, flatten: bool = True) -> Dataset:
    """Read an IDX image/label pair (MNIST layout), scaling pixels to [0, 1].

    With ``flatten`` the inputs are ``(H*W) x N``, otherwise ``1 x H x W x N``.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != raw_labels.shape[0]:
        raise DataError(
            f"{images.shape[0]} images but {raw_labels.shape[0]} labels "
            f"({images_path}, {labels_path})"
        )
    n, h, w = images.shape
    pixels = images.astype(np.float64) / 255.0
    if flatten:
        inputs = pixels.reshape(n, h * w).T
    else:
        inputs = np.moveaxis(pixels, 0, -1)[None, ...]
    dense, mapping = _dense_labels(raw_labels)
    return Dataset(np.ascontiguousarray(inputs), dense, len(mapping), mapping)


def simplex_means(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    """``dim x classes`` vertices of a randomly rotated regular simplex.

    Every pair of vertices is exactly ``separation`` apart.
    """
    if dim < classes - 1:
        raise DataError(f"a {classes}-class simplex needs dim >= {classes - 1}, got {dim}")
    centred = np.eye(classes) - 1.0 / classes
    # orthonormal coordinates inside the (C-1)-dim affine hull
    basis, _ = np.linalg.qr(centred[:, : classes - 1])
    coords = basis.T @ centred
    rot, _ = np.linalg.qr(rng.normal(size=(dim, classes - 1)))
    return rot @ coords * (separation / np.sqrt(2.0))


def gen_blobs(classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs around regular-simplex means.

    Means are ``6 * spread`` apart (1.0 when ``spread`` is 0). Samples are
    grouped by class.
    """
    if classes < 2 or per_class < 2 or dim < 1 or spread < 0:
        raise DataError(
            f"invalid blob parameters: classes={classes}, dim={dim}, "
            f"per_class={per_class}, spread={spread}"
        )
    rng = np.random.default_rng(seed)
    separation = 6.0 * spread if spread > 0 else 1.0
    means = simplex_means(classes, dim, separation, rng)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(size=(dim, classes * per_class)) * spread
    features = means[:, labels] + noise
    return Dataset(features, labels, classes, tuple(range(classes)))


def blob_means(classes: int, dim: int, spread: float, seed: int) -> np.ndarray:
    """The generating means of :func:`gen_blobs` for the same arguments."""
    rng = np.random.default_rng(seed)
    return simplex_means(classes, dim, 6.0 * spread if spread > 0 else 1.0, rng)


def stratified_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class; returns ``(rest, held_out)``."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_held = int(round(fraction * idx.size))
        held.append(idx[:n_held])
        keep.append(idx[n_held:])
    keep_idx = np.sort(np.concatenate(keep))
    held_idx = np.sort(np.concatenate(held))
    return dataset.subset(keep_idx), dataset.subset(held_idx)


def stratified_batches(labels, batch_size: int, num_classes: int, rng) -> list[np.ndarray]:
    """Partition one epoch into batches that each hold every class at least twice.

    The number of batches is ``N // batch_size``, lowered until the smallest
    class can contribute two samples to each batch. Each class is shuffled
    and dealt evenly across the batches.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if counts.min() < 2:
        raise DataError(f"every class needs at least 2 samples, counts are {counts.tolist()}")
    n_batches = max(1, min(labels.size // batch_size, int(counts.min()) // 2))
    parts = [[] for _ in range(n_batches)]
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for b, chunk in enumerate(np.array_split(idx, n_batches)):
            parts[b].append(chunk)
    batches = [rng.permutation(np.concatenate(p)) for p in parts]
    order = rng.permutation(n_batches)
    return [batches[i] for i in order]
