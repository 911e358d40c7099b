"""Binary checkpoint format ``NSNCKPT1``.

All integers are little-endian ``u32``; all tensors are little-endian
``float64`` in C order::

    magic        8 bytes  b"NSNCKPT1"
    u32          record count R
    R records:
      u32        kind tag (see KIND_TAGS)
      u32        number of shape ints S, then S x u32 shape ints
      u32        number of tensors T, then per tensor:
                   u32 ndim, ndim x u32 dims, prod(dims) x f64 values
    u32          metadata length L
    L bytes      UTF-8 JSON metadata (sorted keys)

Network layers come first, in order, followed by exactly one head record.
Tensor order per kind: dense (W, b); batchnorm (gamma, beta, running_mean,
running_var); conv2d (W, b); softmax head (W, b); nullspace classifier
(class_means, projection, sigma_pinv). relu, maxpool and flatten carry no
tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .inference import ClassifierModel
from .network import LayerSpec, Network, SoftmaxHead

MAGIC = b"NSNCKPT1"

KIND_TAGS = {
    "dense": 1,
    "relu": 2,
    "batchnorm": 3,
    "conv2d": 4,
    "maxpool": 5,
    "flatten": 6,
    "softmax_head": 16,
    "nullspace_classifier": 17,
}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

_LAYER_TENSORS = {
    "dense": (("params", "W"), ("params", "b")),
    "conv2d": (("params", "W"), ("params", "b")),
    "batchnorm": (
        ("params", "gamma"),
        ("params", "beta"),
        ("buffers", "running_mean"),
        ("buffers", "running_var"),
    ),
}


@dataclass
class Checkpoint:
    network: Network
    head: object  # SoftmaxHead or ClassifierModel
    metadata: dict = field(default_factory=dict)

    @property
    def head_kind(self) -> str:
        return "softmax" if isinstance(self.head, SoftmaxHead) else "nullspace"


def _u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def _record(kind: str, shape, tensors) -> bytes:
    out = [_u32(KIND_TAGS[kind], len(shape), *shape), _u32(len(tensors))]
    for t in tensors:
        t = np.ascontiguousarray(t, dtype="<f8")
        out.append(_u32(t.ndim, *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def dumps(ckpt: Checkpoint) -> bytes:
    records = []
    for layer in ckpt.network.layers:
        tensors = [getattr(layer, group)[name] for group, name in _LAYER_TENSORS.get(layer.kind, ())]
        records.append(_record(layer.kind, layer.spec.shape, tensors))
    head = ckpt.head
    if isinstance(head, SoftmaxHead):
        w = head.params["W"]
        records.append(_record("softmax_head", (w.shape[1], w.shape[0]), [w, head.params["b"]]))
    elif isinstance(head, ClassifierModel):
        d, c = head.class_means.shape
        records.append(
            _record(
                "nullspace_classifier",
                (d, c, head.projection.shape[1]),
                [head.class_means, head.projection, head.sigma_pinv],
            )
        )
    else:
        raise CheckpointError(f"cannot serialize head of type {type(head).__name__}")
    meta = dict(ckpt.metadata)
    meta["input_shape"] = list(ckpt.network.input_shape)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + _u32(len(records)) + b"".join(records) + _u32(len(blob)) + blob


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.source}: truncated at byte {self.pos}, needed {n} more bytes"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def tensor(self) -> np.ndarray:
        dims = self.u32s(self.u32())
        n = int(np.prod(dims))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)


def loads(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    r = _Reader(data, source)
    r.pos = 8
    n_records = r.u32()
    records = []
    for _ in range(n_records):
        tag = r.u32()
        if tag not in TAG_KINDS:
            raise CheckpointError(f"{source}: unknown record kind tag {tag}")
        shape = r.u32s(r.u32())
        tensors = [r.tensor() for _ in range(r.u32())]
        records.append((TAG_KINDS[tag], shape, tensors))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    if not records or records[-1][0] not in ("softmax_head", "nullspace_classifier"):
        raise CheckpointError(f"{source}: missing head record")

    *layer_records, (head_kind, head_shape, head_tensors) = records
    specs = [LayerSpec(kind, shape) for kind, shape, _ in layer_records]
    network = Network(specs, meta["input_shape"])
    for layer, (kind, _, tensors) in zip(network.layers, layer_records):
        slots = _LAYER_TENSORS.get(kind, ())
        if len(tensors) != len(slots):
            raise CheckpointError(f"{source}: {kind} record has {len(tensors)} tensors")
        for (group, name), t in zip(slots, tensors):
            target = getattr(layer, group)
            if target[name].shape != t.shape:
                raise CheckpointError(
                    f"{source}: {kind}.{name} has shape {t.shape}, expected {target[name].shape}"
                )
            target[name] = t
    if head_kind == "softmax_head":
        d, c = head_shape
        head = SoftmaxHead(d, c)
        head.params["W"], head.params["b"] = head_tensors
    else:
        means, projection, sigma_pinv = head_tensors
        head = ClassifierModel(means, projection, sigma_pinv, head_shape[1])
    return Checkpoint(network=network, head=head, metadata=meta)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return loads(data, str(path))
