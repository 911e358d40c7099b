"""Command-line entry point: ``nullhead {train,eval,gen-blobs,inspect-checkpoint}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .data import gen_blobs, load_csv, load_idx
from .errors import ConfigError, DataError, NullHeadError
from .inference import fmt
from .training import REPORT_SCHEMA, TrainConfig, _csv_text, load_datasets, run_eval, run_train

log = logging.getLogger("nullhead")

# flag -> config key; flags mirror the config keys
_TRAIN_FLAGS = {
    "seed": int,
    "head": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "epsilon": float,
    "out": str,
    "feature_dim": int,
    "arch": str,
    "val_fraction": float,
    "dataset": str,
    "data_path": str,
    "labels_path": str,
    "test_path": str,
    "test_labels_path": str,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nullhead", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train a backbone with the nullspace or softmax head")
    train.add_argument("--config", help="key=value config file")
    for key, typ in _TRAIN_FLAGS.items():
        flag = "--" + key.replace("_", "-")
        if key == "head":
            train.add_argument(flag, choices=("nullspace", "softmax"))
        else:
            train.add_argument(flag, type=typ)
    train.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key"
    )

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", help="config whose test split is evaluated (default: blobs)")
    ev.add_argument("--data", help="CSV dataset, or IDX images with --labels")
    ev.add_argument("--labels", help="IDX labels file")
    ev.add_argument("--k", default="1,5", help="comma-separated k for top-k error")
    ev.add_argument("--batch-size", type=int, default=128)
    ev.add_argument("--out", help="write <out>.csv and <out>.txt")

    gb = sub.add_parser("gen-blobs", help="write a synthetic Gaussian-blob CSV dataset")
    gb.add_argument("--classes", type=int, default=5)
    gb.add_argument("--dim", type=int, default=20)
    gb.add_argument("--per-class", type=int, default=200)
    gb.add_argument("--spread", type=float, default=1.0)
    gb.add_argument("--seed", type=int, default=7)
    gb.add_argument("--out", required=True)

    ins = sub.add_parser("inspect-checkpoint", help="print the layers and metadata of a checkpoint")
    ins.add_argument("checkpoint")
    return parser


def _train_config(args) -> TrainConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in _TRAIN_FLAGS:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_mapping(overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = run_train(cfg)
    last = result.metrics[-1]
    print(f"wrote {result.out_dir}")
    print(f"final train trace ratio {last.fisher_trace_ratio:.6g}")
    print(result.report.summary(include_timing=False))
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--k must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError(f"--k must hold positive integers, got {text!r}")
    return ks


def cmd_eval(args) -> int:
    ks = _parse_ks(args.k)
    if args.data:
        if args.labels:
            meta = ckpt_io.load(args.checkpoint).metadata
            dataset = load_idx(args.data, args.labels, flatten=meta.get("arch") != "conv-small")
        else:
            dataset = load_csv(args.data)
        tag = f"# {REPORT_SCHEMA} data={args.data}"
    else:
        cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
        _, dataset, _ = load_datasets(cfg)
        tag = f"# {REPORT_SCHEMA} config_hash={cfg.config_hash()} seed={cfg.seed}"
    report = run_eval(args.checkpoint, dataset, ks, args.batch_size)
    print(report.summary())
    if args.out:
        stem = Path(args.out)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".csv").write_text(_csv_text(tag, report.csv_header(), [report.csv_row()]))
        stem.with_suffix(".txt").write_text(tag[2:] + "\n" + report.summary() + "\n")
    return 0


def cmd_gen_blobs(args) -> int:
    ds = gen_blobs(args.classes, args.dim, args.per_class, args.spread, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.inputs.shape[0])])
        for label, col in zip(ds.labels, ds.inputs.T):
            writer.writerow([int(label)] + [fmt(v) for v in col])
    print(f"wrote {ds.size} samples, {ds.num_classes} classes, dim {ds.inputs.shape[0]} to {out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    net = ckpt.network
    print(f"input shape {tuple(net.input_shape)} -> {net.output_dim} features")
    for i, layer in enumerate(net.layers):
        print(f"  {i:2d} {layer.kind:<10} {layer.spec.shape}  params {layer.spec.param_count()}")
    head = ckpt.head
    if ckpt.head_kind == "softmax":
        print(f"head softmax  W {head.params['W'].shape}  params {head.param_count()}")
    else:
        print(
            f"head nullspace classifier  means {head.class_means.shape}  "
            f"projection {head.projection.shape}  params 0"
        )
    for key in sorted(ckpt.metadata):
        print(f"{key} = {ckpt.metadata[key]}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-blobs": cmd_gen_blobs,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(message)s",
        )
        return COMMANDS[args.command](args)
    except NullHeadError as exc:
        print(f"nullhead: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nullhead: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
