"""Command-line entry point: train / eval / analyze.

Configs are INI files with sections [pretraining], [fine-tuning], [dataset],
[encoder]; `--set section.key=value` overrides beat the file. Every run
directory gets a manifest.json (written before any other artifact) echoing
the resolved configuration, so reruns from (config, seed) are reproducible.

Exit codes: 0 success, 2 config error, 3 numeric failure during training,
4 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

from . import __version__, analysis, evalkit, trainer
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    MsvqError,
    NonFiniteLossError,
)
from .model import EncoderSpec
from .trainer import DatasetSpec, ProbeSpec, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parse_size(text: str) -> tuple[int, int]:
    sep = "x" if "x" in text else ","
    parts = [p.strip() for p in text.split(sep)]
    if len(parts) != 2:
        raise ConfigError(f"image_size: expected HxW, got '{text}'")
    return int(parts[0]), int(parts[1])


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in text.split(","))


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(section: str, key: str, raw: str, converters: dict):
    conv = converters.get((section, key))
    if conv is None:
        raise ConfigError(f"{section}.{key}: unknown configuration key")
    try:
        if conv is bool:
            return _BOOL[raw.strip().lower()]
        return conv(raw)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{section}.{key}: cannot parse '{raw}'") from e


_CONVERTERS: dict[tuple[str, str], object] = {
    ("pretraining", "epochs"): int,
    ("pretraining", "batch_size"): int,
    ("pretraining", "warmup_epochs"): int,
    ("pretraining", "base_lr"): float,
    ("pretraining", "momentum"): float,
    ("pretraining", "weight_decay"): float,
    ("pretraining", "m1"): float,
    ("pretraining", "m2"): float,
    ("pretraining", "tau_s"): float,
    ("pretraining", "tau_t"): float,
    ("pretraining", "queue_size"): int,
    ("pretraining", "method"): str,
    ("pretraining", "seed"): int,
    ("pretraining", "precision"): str,
    ("pretraining", "analysis_mode"): bool,
    ("fine-tuning", "epochs"): int,
    ("fine-tuning", "batch_size"): int,
    ("fine-tuning", "base_lr"): float,
    ("fine-tuning", "weight_decay"): float,
    ("dataset", "kind"): str,
    ("dataset", "class_count"): int,
    ("dataset", "per_class"): int,
    ("dataset", "per_class_test"): int,
    ("dataset", "image_size"): _parse_size,
    ("dataset", "channels"): int,
    ("dataset", "noise_sigma"): float,
    ("dataset", "pattern_contrast"): float,
    ("dataset", "directory"): str,
    ("dataset", "subset"): int,
    ("encoder", "kind"): str,
    ("encoder", "in_channels"): int,
    ("encoder", "image_size"): _parse_size,
    ("encoder", "conv_channels"): _parse_ints,
    ("encoder", "mlp_hidden"): int,
    ("encoder", "feat_dim"): int,
    ("encoder", "proj_hidden"): int,
    ("encoder", "embed_dim"): int,
}

_FIELD_MAP = {
    ("pretraining", "momentum"): "sgd_momentum",
}


def _sections_to_config(values: dict[tuple[str, str], object]) -> TrainConfig:
    pre = {}
    fine = {}
    ds = {}
    enc = {}
    for (section, key), val in values.items():
        field = _FIELD_MAP.get((section, key), key)
        if section == "pretraining":
            pre[field] = val
        elif section == "fine-tuning":
            fine[field] = val
        elif section == "dataset":
            ds[field] = val
        elif section == "encoder":
            enc[field] = val
    try:
        return TrainConfig(dataset=DatasetSpec(**ds), encoder=EncoderSpec(**enc),
                           finetune=ProbeSpec(**fine), **pre)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str, overrides: list[str] | None = None,
                flag_overrides: dict[str, object] | None = None) -> TrainConfig:
    """Parse an INI config; file values < --set overrides < dedicated flags."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found or unreadable: {path}")
    values: dict[tuple[str, str], object] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[(section, key)] = _coerce(section, key, raw, _CONVERTERS)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        values[(section, key)] = _coerce(section, key, raw, _CONVERTERS)
    for key, val in (flag_overrides or {}).items():
        if val is not None:
            values[("pretraining", key)] = val
    cfg = _sections_to_config(values)
    cfg.validate()
    return cfg


def write_manifest(out_dir: str, cfg: TrainConfig) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "tool": f"msvq {__version__}",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "artifacts": {
            "metrics": os.path.join(out_dir, "metrics.jsonl"),
            "checkpoints": os.path.join(out_dir, "checkpoints"),
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, {
        "seed": args.seed, "method": args.method, "epochs": args.epochs,
    })
    out_dir = args.out_dir
    if out_dir:
        write_manifest(out_dir, cfg)
    train_set, _ = trainer.load_datasets(cfg.dataset, cfg.seed)
    state, metrics = trainer.train(cfg, train_set, out_dir=out_dir)
    if out_dir:
        trainer.save_checkpoint(state, os.path.join(out_dir, "final.ckpt"))
    last = metrics[-1].loss if metrics else float("nan")
    print(json.dumps({"steps": state.step, "final_loss": last,
                      "out_dir": out_dir}))
    return EXIT_OK


def _dataset_name(spec: DatasetSpec) -> str:
    return spec.kind if spec.kind != "synthetic" else (
        f"synthetic-{spec.class_count}x{spec.per_class}")


def cmd_eval(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    cfg = state.config
    train_set, test_set = trainer.load_datasets(cfg.dataset, cfg.seed)
    bank_train = evalkit.extract_features(state.tri.student, train_set,
                                          state.norm_mean, state.norm_std)
    bank_test = evalkit.extract_features(state.tri.student, test_set,
                                         state.norm_mean, state.norm_std)
    if args.mode == "knn":
        k = args.k if args.k is not None else 200
        acc = evalkit.knn_evaluate(bank_train, bank_test, k=k,
                                   class_count=train_set.class_count)
    else:
        k = None
        ft = cfg.finetune
        acc = evalkit.linear_probe(bank_train, bank_test, train_set.class_count,
                                   epochs=ft.epochs, lr=ft.base_lr,
                                   weight_decay=ft.weight_decay,
                                   batch_size=ft.batch_size, seed=cfg.seed)
    report = evalkit.evaluation_report(cfg.method, _dataset_name(cfg.dataset),
                                       args.mode, acc, k, train_set.class_count,
                                       len(train_set), len(test_set))
    print(json.dumps(report))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, f"eval_{args.mode}.json"), "w",
                  encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    cfg = state.config
    train_set, test_set = trainer.load_datasets(cfg.dataset, cfg.seed)
    report = analysis.false_negative_report(state, train_set, k=args.k)
    print(json.dumps(report))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "false_negatives.json"), "w",
                  encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    if args.export_embeddings:
        bank = evalkit.extract_features(state.tri.student, test_set,
                                        state.norm_mean, state.norm_std)
        analysis.export_embeddings(bank, args.export_embeddings)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvq",
                                description="Multi-view/multi-queue SSL trainer")
    p.add_argument("--version", action="version", version=f"msvq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain an encoder")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--method", choices=list(trainer.METHODS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["knn", "linear"], default="knn")
    e.add_argument("--k", type=int)
    e.add_argument("--out-dir")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="false-negative analysis of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--out-dir")
    a.add_argument("--export-embeddings", metavar="CSV_PATH")
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataFormatError, FileNotFoundError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except MsvqError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
