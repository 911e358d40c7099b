"""Training loop, evaluation runs and their on-disk artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import Dataset, gen_blobs, load_csv, load_idx, stratified_batches, stratified_split
from .errors import ConfigError, DataError, NullHeadError, NumericalError
from .head import FALLBACKS, head_loss, head_grad
from .inference import EvalReport, evaluate, fit, fmt
from .linalg import RANK_TOL
from .network import Adam, Network, SoftmaxHead, architecture
from .scatter import LabeledBatch, fisher_trace_ratio

log = logging.getLogger(__name__)

METRICS_SCHEMA = "nullhead-metrics/1"
REPORT_SCHEMA = "nullhead-eval/1"
TIMING_SCHEMA = "nullhead-timing/1"


@dataclass
class TrainConfig:
    dataset: str = "blobs"  # blobs | csv | idx
    data_path: str = ""
    labels_path: str = ""  # idx only
    test_path: str = ""
    test_labels_path: str = ""  # idx only
    blobs_classes: int = 5
    blobs_dim: int = 20
    blobs_per_class: int = 200
    blobs_spread: float = 1.0
    data_seed: int = 7
    test_fraction: float = 0.5
    val_fraction: float = 0.0
    arch: str = "mlp-small"
    feature_dim: int = 64
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epsilon: float = 1.0
    head: str = "nullspace"
    seed: int = 0
    tol_rel: float = RANK_TOL
    fallback: str = "relative"
    average: bool = False
    ridge: float = 0.0
    k_list: str = "1,5"
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4:
            raise ConfigError(f"batch_size must be >= 4, got {self.batch_size}")
        if self.head not in ("nullspace", "softmax"):
            raise ConfigError(f"head must be 'nullspace' or 'softmax', got {self.head!r}")
        if self.dataset not in ("blobs", "csv", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.fallback not in FALLBACKS:
            raise ConfigError(f"fallback must be one of {FALLBACKS}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        self.ks()

    def ks(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(k) for k in str(self.k_list).split(",") if k.strip())
        except ValueError:
            raise ConfigError(f"k_list must be comma-separated integers, got {self.k_list!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError(f"k_list must hold positive integers, got {self.k_list!r}")
        return ks

    # key=value text -------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "TrainConfig":
        return cls.from_mapping({**parse_key_values(text), **(overrides or {})})

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_text(text, overrides)

    def to_text(self, include_out: bool = True) -> str:
        lines = [
            f"{f.name}={_render(getattr(self, f.name))}"
            for f in dataclasses.fields(self)
            if include_out or f.name != "out"
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Digest of every setting except the output directory."""
        return hashlib.sha256(self.to_text(include_out=False).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in (bool, "bool"):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# data --------------------------------------------------------------------


def _same_labels(train: Dataset, test: Dataset) -> Dataset:
    if train.label_map != test.label_map:
        raise DataError(
            f"train and test label sets differ: {train.label_map} vs {test.label_map}"
        )
    return test


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset | None]:
    """``(train, test, validation)`` for a config; validation may be None."""
    if cfg.dataset == "blobs":
        full = gen_blobs(
            cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_per_class, cfg.blobs_spread, cfg.data_seed
        )
        train, test = stratified_split(full, cfg.test_fraction, cfg.data_seed)
    elif cfg.dataset == "csv":
        if not cfg.data_path:
            raise ConfigError("dataset=csv needs data_path")
        train = load_csv(cfg.data_path)
        if cfg.test_path:
            test = _same_labels(train, load_csv(cfg.test_path))
        else:
            train, test = stratified_split(train, cfg.test_fraction, cfg.data_seed)
    else:
        if not (cfg.data_path and cfg.labels_path):
            raise ConfigError("dataset=idx needs data_path and labels_path")
        flatten = cfg.arch != "conv-small"
        train = load_idx(cfg.data_path, cfg.labels_path, flatten=flatten)
        if cfg.test_path:
            if not cfg.test_labels_path:
                raise ConfigError("idx test_path needs test_labels_path")
            test = _same_labels(train, load_idx(cfg.test_path, cfg.test_labels_path, flatten))
        else:
            train, test = stratified_split(train, cfg.test_fraction, cfg.data_seed)
    val = None
    if cfg.val_fraction > 0:
        train, val = stratified_split(train, cfg.val_fraction, cfg.data_seed + 1)
    if cfg.head == "nullspace" and cfg.feature_dim < train.num_classes - 1:
        raise ConfigError(
            f"feature_dim {cfg.feature_dim} is below C-1 = {train.num_classes - 1}; "
            "the nullspace head needs one direction per class boundary"
        )
    if cfg.batch_size < 2 * train.num_classes:
        raise ConfigError(
            f"batch_size {cfg.batch_size} is below 2 x {train.num_classes} classes"
        )
    return train, test, val


# records -----------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    eval_accuracy: float
    top1_error: float
    top5_error: float
    fisher_trace_ratio: float
    projected_trace_ratio: float
    k: int
    min_selected: float
    max_selected: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def row(self) -> list[str]:
        return [fmt(getattr(self, f.name)) for f in dataclasses.fields(self)]


@dataclass
class TrainResult:
    config: TrainConfig
    network: Network
    head: object
    metrics: list[MetricsRecord]
    report: EvalReport
    epoch_seconds: list[float] = field(default_factory=list)
    out_dir: Path | None = None


def _tag_line(schema: str, cfg: TrainConfig, **extra) -> str:
    parts = [f"# {schema}", f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def _csv_text(tag: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(tag + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def param_counts(network: Network, head) -> dict[str, int]:
    head_params = head.param_count() if isinstance(head, SoftmaxHead) else 0
    return {"backbone_params": network.param_count(), "head_params": head_params}


# training ----------------------------------------------------------------


def _head_kwargs(cfg):
    return dict(tol_rel=cfg.tol_rel, average=cfg.average, ridge=cfg.ridge, fallback=cfg.fallback)


def _fit_classifier(cfg, features, labels, num_classes):
    """Nullspace head state over a whole feature set and the classifier built from it."""
    batch = LabeledBatch(features, labels, num_classes)
    _, state = head_loss(batch, cfg.epsilon, **_head_kwargs(cfg))
    return fit(features, labels, state, cfg.tol_rel), state


def run_train(cfg: TrainConfig, write: bool = True) -> TrainResult:
    """Train a backbone with the configured head and evaluate it on the test split.

    Each epoch ends with a full pass over the training set in evaluation
    mode: the nullspace classifier is refitted from those features and
    scored on the validation split (or the test split when there is none).
    With ``write`` the metrics CSV, timing CSV, resolved config, checkpoint
    and final report are written under ``cfg.out``.
    """
    train, test, val = load_datasets(cfg)
    monitor = val if val is not None else test
    num_classes = train.num_classes
    k_list = cfg.ks()
    in_shape = train.sample_shape
    network = Network(architecture(cfg.arch, in_shape, cfg.feature_dim), in_shape, seed=cfg.seed)
    softmax = SoftmaxHead(cfg.feature_dim, num_classes, seed=cfg.seed + 1) if cfg.head == "softmax" else None
    params = network.parameters()
    if softmax is not None:
        params.update({f"head.{k}": v for k, v in softmax.params.items()})
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)

    metrics: list[MetricsRecord] = []
    seconds: list[float] = []
    classifier = None
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        losses = []
        for b, idx in enumerate(stratified_batches(train.labels, cfg.batch_size, num_classes, rng)):
            labels = train.labels[idx]
            assert np.all(np.bincount(labels, minlength=num_classes) >= 2)
            feats, cache = network.forward(train.inputs[..., idx], training=True)
            try:
                if softmax is None:
                    batch = LabeledBatch(feats, labels, num_classes)
                    loss, state = head_loss(batch, cfg.epsilon, **_head_kwargs(cfg))
                    grad_feats = head_grad(batch, state)
                    head_grads = {}
                else:
                    loss, g = softmax.loss(feats, labels)
                    grad_feats = g["features"]
                    head_grads = {"head.W": g["W"], "head.b": g["b"]}
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss {loss}")
                grads, _ = network.backward(cache, grad_feats)
                grads.update(head_grads)
                opt.step(params, grads)
            except NullHeadError as exc:
                raise type(exc)(
                    f"epoch {epoch} batch {b} (seed {cfg.seed}, "
                    f"first sample indices {idx[:8].tolist()}): {exc}"
                ) from exc
            losses.append(loss)

        train_feats, _ = network.forward(train.inputs, training=False)
        eval_feats, _ = network.forward(monitor.inputs, training=False)
        try:
            classifier, state = _fit_classifier(cfg, train_feats, train.labels, num_classes)
            projected = fisher_trace_ratio(state.projection.T @ train_feats, train.labels, num_classes)
            diag = (state.k, float(state.selected_values.min()), float(state.selected_values.max()))
        except NullHeadError:
            if softmax is None:
                raise
            projected, diag = float("nan"), (0, float("nan"), float("nan"))
        model = softmax if softmax is not None else classifier
        rep = evaluate(model, eval_feats, monitor.labels, (1, 5))
        metrics.append(
            MetricsRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                eval_accuracy=rep.accuracy,
                top1_error=rep.top_k_errors[1],
                top5_error=rep.top_k_errors[5],
                fisher_trace_ratio=fisher_trace_ratio(train_feats, train.labels, num_classes),
                projected_trace_ratio=projected,
                k=diag[0],
                min_selected=diag[1],
                max_selected=diag[2],
            )
        )
        seconds.append(time.perf_counter() - start)
        log.info(
            "epoch %d loss %.6g acc %.4f trace ratio %.4g",
            epoch, metrics[-1].train_loss, rep.accuracy, metrics[-1].fisher_trace_ratio,
        )

    head = softmax if softmax is not None else classifier
    test_feats, _ = network.forward(test.inputs, training=False)
    report = evaluate(head, test_feats, test.labels, k_list)
    report.extra.update(param_counts(network, head))
    result = TrainResult(cfg, network, head, metrics, report, seconds)
    if write:
        write_train_outputs(result, train)
    return result


def _metadata(cfg: TrainConfig, network, head, train: Dataset) -> dict:
    return {
        "format_version": 1,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "head": cfg.head,
        "arch": cfg.arch,
        "feature_dim": cfg.feature_dim,
        "num_classes": train.num_classes,
        "label_map": list(train.label_map),
        **param_counts(network, head),
    }


def write_train_outputs(result: TrainResult, train: Dataset) -> Path:
    cfg = result.config
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = _tag_line(METRICS_SCHEMA, cfg, head=cfg.head)
    (out / "metrics.csv").write_text(
        _csv_text(tag, MetricsRecord.header(), [m.row() for m in result.metrics])
    )
    (out / "timing.csv").write_text(
        _csv_text(
            _tag_line(TIMING_SCHEMA, cfg),
            ["stage", "seconds"],
            [[f"epoch{m.epoch}", fmt(s)] for m, s in zip(result.metrics, result.epoch_seconds)]
            + [["inference_per_batch", fmt(result.report.inference_seconds_per_batch)]],
        )
    )
    (out / "config.txt").write_text(
        f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n" + cfg.to_text()
    )
    write_report(result.report, cfg, out / "report")
    meta = _metadata(cfg, result.network, result.head, train)
    ckpt_io.save(ckpt_io.Checkpoint(result.network, result.head, meta), out / "model.ckpt")
    result.out_dir = out
    return out


def write_report(report: EvalReport, cfg: TrainConfig, stem: Path) -> None:
    """``<stem>.csv`` and ``<stem>.txt``; timings are left out so both files are reproducible."""
    header = [h for h in report.csv_header() if h != "inference_seconds_per_batch"]
    row = report.csv_row()[: len(header)]
    stem.with_suffix(".csv").write_text(
        _csv_text(_tag_line(REPORT_SCHEMA, cfg), header, [row])
    )
    stem.with_suffix(".txt").write_text(
        f"config_hash={cfg.config_hash()} seed={cfg.seed}\n"
        + report.summary(include_timing=False)
        + "\n"
    )


# evaluation --------------------------------------------------------------


def run_eval(checkpoint_path, dataset: Dataset, k_list=(1, 5), batch_size: int = 128) -> EvalReport:
    """Evaluate a saved model on ``dataset``.

    The report's ``extra`` holds the backbone and head parameter counts and
    the measured feature-extraction time per batch (reported separately
    from the head's classification time).
    """
    ckpt = ckpt_io.load(checkpoint_path)
    expected = tuple(ckpt.network.input_shape)
    if dataset.sample_shape != expected:
        raise DataError(f"dataset samples have shape {dataset.sample_shape}, model expects {expected}")
    label_map = tuple(ckpt.metadata.get("label_map", ()))
    if label_map and dataset.label_map and tuple(dataset.label_map) != label_map:
        raise DataError(f"dataset labels {dataset.label_map} do not match model labels {label_map}")

    n = dataset.size
    chunks = []
    start = time.perf_counter()
    for lo in range(0, n, batch_size):
        feats, _ = ckpt.network.forward(dataset.inputs[..., lo : lo + batch_size], training=False)
        chunks.append(feats)
    feature_seconds = (time.perf_counter() - start) / len(chunks)
    features = np.concatenate(chunks, axis=1)
    report = evaluate(ckpt.head, features, dataset.labels, k_list, batch_size)
    report.extra.update(param_counts(ckpt.network, ckpt.head))
    report.feature_seconds_per_batch = feature_seconds
    return report
