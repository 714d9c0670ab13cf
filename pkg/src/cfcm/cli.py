"""Command-line entry point: ``cfcm {synth,train,eval,predict,gradcheck}``.

Configuration comes from built-in defaults, then an optional ``key=value``
file (``--config``), then command-line flags. The merged config is validated
in full before any file is written.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import data as dio
from .gradcheck import SUITES, run_suites
from .metrics import MetricReport, evaluate_labels
from .tensor import Tensor
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    fit,
    load_checkpoint,
    predict,
    predict_labels,
    read_checkpoint,
    save_checkpoint,
)


@dataclass(frozen=True)
class Key:
    kind: Callable[[str], Any]
    default: Any
    help: str
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _width(text: str) -> str:
    Fraction(text)
    return text


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "random seed"),
    "out_dir": Key(str, ".", "directory for every artifact"),
    # synth
    "count": Key(int, 64, "number of synthetic samples", lambda v: v >= 1, ">= 1"),
    "classes": Key(int, 1, "1 = binary, 3 = background/shaft/tip", lambda v: v in (1, 3), "1 or 3"),
    "image_size": Key(int, 64, "synthetic image side", lambda v: v >= 32 and v % 32 == 0, "a multiple of 32"),
    "noise": Key(float, 0.08, "noise amplitude", lambda v: v >= 0, ">= 0"),
    "blobs_min": Key(int, 2, "fewest blobs / clutter patches", lambda v: v >= 1, ">= 1"),
    "blobs_max": Key(int, 2, "most blobs / clutter patches", lambda v: v >= 1, ">= 1"),
    "manifest_folds": Key(int, 5, "folds recorded in manifest.csv", lambda v: v >= 2, ">= 2"),
    "groups": Key(int, 4, "sequence groups recorded in manifest.csv", lambda v: v >= 1, ">= 1"),
    # train / eval
    "data_dir": Key(str, "data", "dataset directory (relative to out_dir unless absolute)"),
    "decoder": Key(str, "cfcm", "cfcm | skip_sum | skip_concat",
                   lambda v: v in ("cfcm", "skip_sum", "skip_concat"), "cfcm, skip_sum or skip_concat"),
    "depth": Key(int, 18, "encoder depth", lambda v: v in (18, 34, 50, 101), "18, 34, 50 or 101"),
    "width_mult": Key(_width, "1/8", "channel width multiplier", lambda v: Fraction(v) > 0, "positive"),
    "hidden": Key(int, 0, "ConvLSTM hidden width (0: 32 * width_mult)", lambda v: v >= 0, ">= 0"),
    "upsample_mode": Key(str, "nearest", "state upsampling", lambda v: v in ("nearest", "bilinear"),
                         "nearest or bilinear"),
    "batch_size": Key(int, 16, "batch size", lambda v: v >= 1, ">= 1"),
    "lr": Key(float, 1e-5, "Adam learning rate", lambda v: v >= 0, ">= 0"),
    "epochs": Key(int, 30, "training epochs", lambda v: v >= 0, ">= 0"),
    "input_size": Key(int, 0, "network input side (0: dataset size)", lambda v: v == 0 or v % 32 == 0,
                      "0 or a multiple of 32"),
    "val_fold": Key(int, 0, "manifest fold held out for validation", lambda v: v >= 0, ">= 0"),
    "folds": Key(int, 0, "k-fold protocol over the whole dataset (0: single split)",
                 lambda v: v == 0 or v >= 2, "0 or >= 2"),
    "group_folds": Key(lambda s: s.lower() in ("1", "true", "yes"), False, "leave-groups-out folds"),
    "eval_split": Key(str, "val", "val | all", lambda v: v in ("val", "all"), "val or all"),
    "checkpoint": Key(str, "model.ckpt", "checkpoint file"),
    "log": Key(str, "train_log.csv", "training log"),
    "report": Key(str, "report.csv", "metric report"),
    # predict
    "image": Key(str, "", "input image for predict"),
    "output": Key(str, "prediction.pgm", "output mask for predict"),
    # gradcheck
    "only": Key(str, "", "comma-separated gradcheck suites"),
}

COMMAND_KEYS = {
    "synth": ["count", "classes", "image_size", "noise", "blobs_min", "blobs_max", "manifest_folds", "groups",
              "data_dir"],
    "train": ["data_dir", "decoder", "depth", "width_mult", "hidden", "upsample_mode", "batch_size", "lr", "epochs",
              "input_size", "val_fold", "folds", "group_folds", "checkpoint", "log"],
    "eval": ["data_dir", "checkpoint", "report", "folds", "group_folds", "val_fold", "eval_split", "decoder",
             "depth", "width_mult"],
    "predict": ["checkpoint", "image", "output"],
    "gradcheck": ["only"],
}
GLOBAL_KEYS = ["seed", "out_dir"]
MODEL_KEYS = {"decoder": "decoder_kind", "depth": "depth", "width_mult": "width_mult"}


class UsageError(Exception):
    pass


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def resolve_config(file_values: dict[str, str], cli_values: dict[str, Any]) -> dict[str, Any]:
    unknown = sorted(set(file_values) - set(SCHEMA))
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r}")
    cfg = {}
    for name, key in SCHEMA.items():
        if cli_values.get(name) is not None:
            raw = cli_values[name]
        elif name in file_values:
            raw = file_values[name]
        else:
            cfg[name] = key.default
            continue
        try:
            val = key.kind(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError, ZeroDivisionError):
            raise UsageError(f"invalid value for {name}: {raw!r}") from None
        if key.check is not None and not key.check(val):
            raise UsageError(f"invalid value for {name}: {raw!r} (must be {key.rule})")
        cfg[name] = val
    if cfg["blobs_min"] > cfg["blobs_max"]:
        raise UsageError("blobs_min must not exceed blobs_max")
    return cfg


def _path(cfg: dict, name: str) -> Path:
    p = Path(cfg[name])
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


def _fold_path(path: Path, fold: int) -> Path:
    return path.with_name(f"{path.stem}.fold{fold}{path.suffix}")


def config_echo(cfg: dict) -> str:
    # out_dir is left out so the log does not depend on where the run was placed
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg) if k != "out_dir")


# ------------------------------------------------------------------- commands


def cmd_synth(cfg: dict) -> int:
    synth = dio.SynthConfig(
        count=cfg["count"], image_size=cfg["image_size"], num_classes=cfg["classes"],
        blobs=(cfg["blobs_min"], cfg["blobs_max"]), noise=cfg["noise"], seed=cfg["seed"],
        folds=cfg["manifest_folds"], groups=cfg["groups"],
    )
    root = _path(cfg, "data_dir")
    dio.ensure_writable_dir(root)
    ds = dio.generate_synthetic(synth)
    dio.write_dataset(ds, root)
    print(f"wrote {len(ds)} samples to {root}")
    return 0


def _prepared(ds: dio.Dataset, size: int) -> dio.Dataset:
    if size in (0, ds.images.shape[-1]) and ds.images.shape[-2] == ds.images.shape[-1]:
        return ds
    images = np.stack([dio.resize_bilinear(img, size) for img in ds.images]).astype(np.float32)
    masks = np.stack([dio.resize_nearest(m, size) for m in ds.masks])
    return dio.Dataset(images, masks, ds.ids, ds.folds, ds.groups, ds.num_classes)


def _train_config(cfg: dict, ds: dio.Dataset) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"],
        num_classes=ds.num_classes, width_mult=cfg["width_mult"], depth=cfg["depth"],
        decoder_kind=cfg["decoder"], input_size=cfg["input_size"] or ds.images.shape[-1],
        in_channels=ds.images.shape[1], hidden=cfg["hidden"] or None, upsample_mode=cfg["upsample_mode"],
    )


def _splits(cfg: dict, ds: dio.Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg["folds"]:
        groups = ds.groups if cfg["group_folds"] else None
        return dio.kfold_split(len(ds), cfg["folds"], cfg["seed"], groups)
    test = np.flatnonzero(ds.folds == cfg["val_fold"])
    return [(np.flatnonzero(ds.folds != cfg["val_fold"]), test)]


def cmd_train(cfg: dict) -> int:
    ds = dio.read_dataset(_path(cfg, "data_dir"))
    tcfg = _train_config(cfg, ds)
    ds = _prepared(ds, tcfg.input_size)
    splits = _splits(cfg, ds)
    for train_idx, _ in splits:
        if len(train_idx) < tcfg.batch_size:
            raise ConfigError(f"training split of {len(train_idx)} samples is smaller than one batch "
                              f"of {tcfg.batch_size}")
    ckpt_path, log_path = _path(cfg, "checkpoint"), _path(cfg, "log")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    best = []
    with open(log_path, "w", newline="") as fh:
        for line in config_echo(cfg).splitlines():
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "loss", "train_dice"] + (["fold"] if cfg["folds"] else []))
        for fold, (train_idx, test_idx) in enumerate(splits):
            suffix = [fold] if cfg["folds"] else []

            def log_epoch(stats, val):
                for epoch, step, loss, dice in stats.steps:
                    writer.writerow([epoch, step, repr(loss), repr(dice)] + suffix)
                fh.flush()
                msg = f"epoch {stats.epoch} loss={stats.mean_loss:.4f} train_dice={stats.mean_train_dice:.4f}"
                print(msg + (f" val_dice={val:.4f}" if val is not None else ""), flush=True)

            result = fit(tcfg, ds.subset(train_idx), ds.subset(test_idx) if len(test_idx) else None, log_epoch)
            path = _fold_path(ckpt_path, fold) if cfg["folds"] else ckpt_path
            save_checkpoint(result.model, result.optimizer, tcfg, path)
            best.append(max(result.val_dice) if result.val_dice else float("nan"))
    print(f"decoder={tcfg.decoder_kind} depth={tcfg.depth} best_val_dice={float(np.mean(best)):.4f}")
    return 0


def _load_model(path: Path, cfg: dict, explicit: set[str]):
    ckpt = read_checkpoint(path)
    saved = TrainConfig.from_text(ckpt.config_text)
    for key, attr in MODEL_KEYS.items():
        want, have = cfg[key], getattr(saved, attr)
        if key == "width_mult":
            want, have = Fraction(want), Fraction(have)
        if key in explicit and str(want) != str(have):
            raise ConfigError(f"{key}={cfg[key]} does not match checkpoint {path} ({getattr(saved, attr)})")
    return load_checkpoint(path), saved


def cmd_eval(cfg: dict, explicit: set[str] = frozenset()) -> int:
    ckpt_path = _path(cfg, "checkpoint")
    ds = dio.read_dataset(_path(cfg, "data_dir"))
    if cfg["folds"]:
        splits = _splits(cfg, ds)
    elif cfg["eval_split"] == "all":
        splits = [(np.array([], dtype=int), np.arange(len(ds)))]
    else:
        splits = _splits(cfg, ds)
    fold_ckpts = [_fold_path(ckpt_path, f) if cfg["folds"] and _fold_path(ckpt_path, f).is_file() else ckpt_path
                  for f in range(len(splits))]
    for p in fold_ckpts:
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    report = MetricReport()
    fold_rows = []
    for fold, ((_, test_idx), path) in enumerate(zip(splits, fold_ckpts)):
        model, saved = _load_model(path, cfg, explicit)
        sub = _prepared(ds.subset(test_idx), saved.input_size)
        labels = predict_labels(predict(model, sub.images))
        if sub.masks.shape[-2:] != ds.masks.shape[-2:]:
            labels = np.stack([dio.resize_nearest(m, ds.masks.shape[-2:]) for m in labels])
        fold_report = evaluate_labels(labels, ds.masks[test_idx], sub.ids, ds.label_count)
        report.rows.extend(fold_report.rows)
        for k, v in fold_report.excluded.items():
            report.excluded[k] = report.excluded.get(k, 0) + v
        if cfg["folds"]:
            fold_rows.extend(fold_report.aggregate_rows(label=f"fold{fold}"))
    out = _path(cfg, "report")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(fold_rows), encoding="utf-8")
    for k in report.classes:
        agg = report.aggregate(k)
        print(f"class={k} dice={agg['dice'][0]:.4f}±{agg['dice'][1]:.4f} "
              f"hd={agg['hd'][0]:.3f} excluded={report.excluded.get(k, 0)}")
    return 0


def cmd_predict(cfg: dict) -> int:
    if not cfg["image"]:
        raise UsageError("predict needs --image")
    ckpt_path = _path(cfg, "checkpoint")
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    image = dio.load_pgm(cfg["image"])
    model = load_checkpoint(ckpt_path)
    saved = TrainConfig.from_text(read_checkpoint(ckpt_path).config_text)
    if image.shape[0] != saved.in_channels:
        raise dio.ImageFormatError(f"model expects {saved.in_channels} channels, image has {image.shape[0]}", 0)
    h, w = image.shape[1:]
    resized = dio.resize_bilinear(image, saved.input_size).astype(np.float32)
    labels = predict_labels(model(Tensor(resized[None]), "eval").data)[0]
    mask = dio.resize_nearest(labels, (h, w))
    out = Path(cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    dio.save_mask(out, mask)
    print(f"wrote {out} ({h}x{w}, labels {sorted(np.unique(mask).tolist())})")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    only = [s.strip() for s in cfg["only"].split(",") if s.strip()] or None
    if only:
        unknown = [s for s in only if s not in SUITES]
        if unknown:
            raise UsageError(f"unknown gradcheck suite {unknown[0]!r}; choose from {', '.join(SUITES)}")
    ok = True
    for name, err, tol, passed in run_suites(only):
        ok &= passed
        print(f"{name:<10} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfcm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for key in GLOBAL_KEYS + keys:
            spec = SCHEMA[key]
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=spec.help)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cli_values = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    try:
        file_values = {}
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise UsageError(f"config file not found: {path}")
            file_values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        cfg = resolve_config(file_values, cli_values)
        explicit = set(cli_values) | set(file_values)
        if args.command == "eval":
            return cmd_eval(cfg, explicit)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, dio.ImageFormatError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
