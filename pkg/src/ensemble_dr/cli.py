"""Command-line entry point: ensemble-dr prepare|train|evaluate|compare|predict|plot.

Options can come from a JSON run-config file (--config) and/or flags;
flags win. Exit codes: 0 success, 2 input/validation error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from .ensemble import (
    EnsembleConfig,
    build_ensemble,
    forward,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from .errors import ConfigError, DatasetError, EnsembleDRError
from .experiments import compare_models, emit_figures
from .metrics import MetricsReport, compute_metrics, predict_labels
from .training import TrainConfig, TrainHistory, train

_TINY_NAMES = {"tiny_a", "tiny_b"}

_CONFIG_SCHEMA = {
    "dataset": {"labels_file", "image_dir", "test_fraction", "val_fraction"},
    "ensemble": {
        "backbone_names", "freeze_fraction", "head_width",
        "dropout_rate", "num_classes", "pretrained",
    },
    "train": {
        "learning_rate", "batch_size", "max_epochs",
        "optimizer", "loss", "seed", "keep_best_val",
    },
    "experiment": {"n_runs", "base_seed", "models"},
    "output_dir": None,
}

_PATH_KEYS = {("dataset", "labels_file"), ("dataset", "image_dir")}


def load_run_config(path) -> dict:
    """Load and validate a run-config JSON file.

    Unknown keys are rejected by name; path values resolve relative to
    the config file's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")

    base = path.resolve().parent
    for section, value in doc.items():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown config key {section!r}")
        allowed = _CONFIG_SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        for key in value:
            if key not in allowed:
                raise ConfigError(f"{path}: unknown config key {section!r}.{key!r}")
        for key in value:
            if (section, key) in _PATH_KEYS and value[key] is not None:
                value[key] = str((base / value[key]).resolve())
    if "output_dir" in doc and doc["output_dir"] is not None:
        doc["output_dir"] = str((base / doc["output_dir"]).resolve())
    return doc


def _cfg_get(config: dict, section: str, key: str, flag_value, default):
    if flag_value is not None:
        return flag_value
    value = config.get(section, {}).get(key)
    return default if value is None else value


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"missing required option: {what}")
    return value


def _resolve_pretrained(backbones, flag_value) -> bool:
    if flag_value is not None:
        return bool(flag_value)
    # Auto: pretrained for the real backbones, never for the tiny ones.
    return not any(b in _TINY_NAMES for b in backbones)


def _ensemble_config(config: dict, args) -> EnsembleConfig:
    backbones = args.backbones.split(",") if args.backbones else None
    backbones = _cfg_get(config, "ensemble", "backbone_names", backbones,
                         ["vgg16", "inception_v3"])
    pretrained_flag = args.pretrained
    if pretrained_flag is None:
        pretrained_flag = config.get("ensemble", {}).get("pretrained")
    return EnsembleConfig(
        backbone_names=tuple(b.strip() for b in backbones),
        freeze_fraction=_cfg_get(config, "ensemble", "freeze_fraction",
                                 args.freeze_fraction, 0.25),
        head_width=_cfg_get(config, "ensemble", "head_width", args.head_width, 256),
        dropout_rate=_cfg_get(config, "ensemble", "dropout_rate", args.dropout, 0.5),
        num_classes=config.get("ensemble", {}).get("num_classes", 5),
        pretrained=_resolve_pretrained(backbones, pretrained_flag),
    )


def _train_config(config: dict, args) -> TrainConfig:
    return TrainConfig(
        learning_rate=_cfg_get(config, "train", "learning_rate", args.lr, 1e-4),
        batch_size=_cfg_get(config, "train", "batch_size", args.batch_size, 16),
        max_epochs=_cfg_get(config, "train", "max_epochs", args.epochs, 40),
        optimizer=config.get("train", {}).get("optimizer", "adam"),
        loss=config.get("train", {}).get("loss", "categorical_cross_entropy"),
        seed=_cfg_get(config, "train", "seed", args.seed, 0),
        keep_best_val=args.keep_best_val
        or bool(config.get("train", {}).get("keep_best_val", False)),
    )


def _prepare_manifest(config: dict, args) -> ds.DatasetManifest:
    labels_file = _require(
        _cfg_get(config, "dataset", "labels_file", args.labels_file, None),
        "--labels-file (or dataset.labels_file)",
    )
    image_dir = _require(
        _cfg_get(config, "dataset", "image_dir", args.image_dir, None),
        "--image-dir (or dataset.image_dir)",
    )
    test_fraction = _cfg_get(config, "dataset", "test_fraction", args.test_fraction, 0.2)
    val_fraction = _cfg_get(config, "dataset", "val_fraction", args.val_fraction, 0.1)
    seed = _cfg_get(config, "train", "seed", args.seed, 0)

    manifest = ds.load_manifest(labels_file, image_dir)
    manifest = ds.stratified_split(manifest, test_fraction, seed)
    return ds.carve_validation(manifest, val_fraction, seed)


def _output_dir(config: dict, args) -> Path:
    out = args.output_dir or config.get("output_dir") or "."
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> int:
    config = load_run_config(args.config) if args.config else {}
    manifest = _prepare_manifest(config, args)
    out_dir = _output_dir(config, args)
    manifest.to_json(out_dir / "manifest.json")

    print(f"{'class':<16}{'train':>8}{'val':>8}{'test':>8}")
    per_split = {s: manifest.split_counts(s) for s in ("train", "val", "test")}
    for c, name in enumerate(manifest.class_names):
        print(f"{name:<16}{per_split['train'][c]:>8}{per_split['val'][c]:>8}"
              f"{per_split['test'][c]:>8}")
    totals = {s: sum(per_split[s]) for s in per_split}
    print(f"{'total':<16}{totals['train']:>8}{totals['val']:>8}{totals['test']:>8}")
    print(f"wrote {out_dir / 'manifest.json'}")
    return 0


def _load_or_prepare_manifest(config: dict, args) -> ds.DatasetManifest:
    if args.manifest:
        return ds.DatasetManifest.from_json(args.manifest)
    return _prepare_manifest(config, args)


def cmd_train(args) -> int:
    config = load_run_config(args.config) if args.config else {}
    manifest = _load_or_prepare_manifest(config, args)
    ens_cfg = _ensemble_config(config, args)
    train_cfg = _train_config(config, args)
    out_dir = _output_dir(config, args)

    model = build_ensemble(ens_cfg, seed=train_cfg.seed)

    callback = None
    if args.checkpoint_every:
        def callback(epoch, m, _history):
            if (epoch + 1) % args.checkpoint_every == 0:
                save_checkpoint(m, out_dir / f"checkpoint_epoch_{epoch + 1:03d}.edr",
                                class_names=manifest.class_names)

    model, history = train(model, manifest, train_cfg, epoch_callback=callback)

    save_checkpoint(model, out_dir / "checkpoint.edr", class_names=manifest.class_names)
    (out_dir / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    history.to_csv(out_dir / "history.csv")
    emit_figures(history, None, out_dir, class_names=manifest.class_names)
    final = history.train_accuracy[-1]
    print(f"trained {train_cfg.max_epochs} epochs; final train accuracy {final:.4f}")
    print(f"wrote {out_dir / 'checkpoint.edr'}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_run_config(args.config) if args.config else {}
    model = load_checkpoint(args.checkpoint)
    header = read_checkpoint_header(args.checkpoint)
    class_names = header.get("class_names") or list(ds.DEFAULT_CLASS_NAMES)
    manifest = ds.DatasetManifest.from_json(args.manifest)
    out_dir = _output_dir(config, args)

    true_labels, pred_labels, _ = predict_labels(model, manifest, args.split)
    report = compute_metrics(true_labels, pred_labels, model.config.num_classes)
    report.to_json(out_dir / "metrics.json")
    report.confusion_to_csv(out_dir / "confusion.csv", class_names)
    emit_figures(None, report, out_dir, class_names=class_names)
    print(f"accuracy {report.accuracy:.4f}  macro-F1 {report.macro['f1']:.4f}  "
          f"top-1 error {report.top1_error_pct:.2f}%")
    print(f"wrote {out_dir / 'metrics.json'}")
    return 0


def _comparison_configs(config: dict, args) -> list:
    base = _ensemble_config(config, args)
    models = config.get("experiment", {}).get("models")
    if models is None:
        models = [
            {"name": "vgg16", "backbone_names": ["vgg16"]},
            {"name": "inception_v3", "backbone_names": ["inception_v3"]},
            {"name": "ensemble", "backbone_names": ["vgg16", "inception_v3"]},
        ]
    named = []
    for entry in models:
        if "name" not in entry:
            raise ConfigError("each experiment.models entry needs a 'name'")
        overrides = {k: v for k, v in entry.items() if k != "name"}
        if "backbone_names" in overrides:
            overrides["backbone_names"] = tuple(overrides["backbone_names"])
            overrides.setdefault(
                "pretrained", _resolve_pretrained(overrides["backbone_names"], None)
            )
        try:
            cfg = replace(base, **overrides)
        except TypeError as exc:
            raise ConfigError(f"invalid model entry {entry['name']!r}: {exc}") from exc
        named.append((entry["name"], cfg))
    return named


def cmd_compare(args) -> int:
    if not args.config:
        raise ConfigError("compare requires --config")
    config = load_run_config(args.config)
    labels_file = _require(
        _cfg_get(config, "dataset", "labels_file", args.labels_file, None),
        "dataset.labels_file",
    )
    image_dir = _require(
        _cfg_get(config, "dataset", "image_dir", args.image_dir, None),
        "dataset.image_dir",
    )
    manifest = ds.load_manifest(labels_file, image_dir)
    train_cfg = _train_config(config, args)
    n_runs = _cfg_get(config, "experiment", "n_runs", args.n_runs, 20)
    base_seed = _cfg_get(config, "experiment", "base_seed", args.base_seed, 0)
    out_dir = _output_dir(config, args)

    table = compare_models(
        _comparison_configs(config, args),
        manifest,
        train_cfg,
        n_runs=n_runs,
        base_seed=base_seed,
        test_fraction=_cfg_get(config, "dataset", "test_fraction", args.test_fraction, 0.2),
        val_fraction=_cfg_get(config, "dataset", "val_fraction", args.val_fraction, 0.1),
        out_dir=out_dir,
    )
    for row in table.rows:
        print(f"{row['model_name']:<20}{row['mean_accuracy_pct']:>8.2f}%"
              f"  (std {row['std_accuracy_pct']:.2f})")
    print(f"wrote {out_dir / 'comparison.csv'}")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    header = read_checkpoint_header(args.checkpoint)
    class_names = header.get("class_names") or list(ds.DEFAULT_CLASS_NAMES)
    status = 0
    for image_path in args.images:
        try:
            with Image.open(image_path) as img:
                raw = np.asarray(img.convert("RGB"))
            tensor = ds.preprocess_image(raw).tensor
            probs = forward(model, tensor[None], mode="infer")[0]
            idx = int(probs.argmax())
            line = {
                "image": str(image_path),
                "class": class_names[idx] if idx < len(class_names) else str(idx),
                "class_index": idx,
                "probs": [float(p) for p in probs],
            }
        except (OSError, EnsembleDRError) as exc:
            line = {"image": str(image_path), "error": str(exc)}
            status = 2
        print(json.dumps(line))
    return status


def cmd_plot(args) -> int:
    if not args.history and not args.metrics:
        raise ConfigError("plot needs --history and/or --metrics")
    history = None
    report = None
    if args.history:
        try:
            history = TrainHistory.from_dict(json.loads(Path(args.history).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read history {args.history}: {exc}") from exc
    if args.metrics:
        try:
            report = MetricsReport.from_json(args.metrics)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read metrics {args.metrics}: {exc}") from exc
    class_names = (args.class_names.split(",") if args.class_names
                   else list(ds.DEFAULT_CLASS_NAMES))
    out_dir = Path(args.output_dir or ".")
    written = emit_figures(history, report, out_dir, class_names=class_names)
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_common(parser):
    parser.add_argument("--config", help="run-config JSON file")
    parser.add_argument("--output-dir", help="directory for outputs")


def _add_dataset_flags(parser):
    parser.add_argument("--labels-file", help="CSV with header id_code,diagnosis")
    parser.add_argument("--image-dir", help="directory of PNG/JPEG images")
    parser.add_argument("--test-fraction", type=float, default=None)
    parser.add_argument("--val-fraction", type=float, default=None)


def _add_model_flags(parser):
    parser.add_argument("--backbones", help="comma list, e.g. vgg16,inception_v3")
    parser.add_argument("--freeze-fraction", type=float, default=None)
    parser.add_argument("--head-width", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--pretrained", dest="pretrained", action="store_true", default=None)
    group.add_argument("--no-pretrained", dest="pretrained", action="store_false")


def _add_train_flags(parser):
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--keep-best-val", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensemble-dr",
        description="Dual-backbone transfer-ensemble for 5-class DR grading",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate dataset and write a split manifest")
    _add_common(p)
    _add_dataset_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the ensemble and write checkpoint/history")
    _add_common(p)
    _add_dataset_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--manifest", help="manifest JSON from prepare (skips resplitting)")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="also write a checkpoint every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="repeated simulations over model variants")
    _add_common(p)
    _add_dataset_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--n-runs", type=int, default=None)
    p.add_argument("--base-seed", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="classify images, one JSON line each")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="re-render curves/confusion figures from JSON")
    p.add_argument("--history", help="history.json from train")
    p.add_argument("--metrics", help="metrics.json from evaluate")
    p.add_argument("--class-names", help="comma list of 5 class names")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EnsembleDRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # runtime failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
