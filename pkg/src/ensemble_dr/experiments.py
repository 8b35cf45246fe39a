"""Repeated-simulation harness, model comparison and figure emission.

Each simulation gets a fresh stratified split (seed = base_seed + run
index), a freshly built model and a full train + test evaluation, so
comparisons between configurations are seed-paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataset as ds
from .ensemble import EnsembleConfig, build_ensemble, save_checkpoint
from .errors import TrainingError
from .metrics import MetricsReport, compute_metrics, predict_labels
from .training import TrainConfig, TrainHistory, train


@dataclass
class RunResult:
    seed: int
    report: MetricsReport
    history: TrainHistory


@dataclass
class RunAggregate:
    """Per-run reports plus mean/std accuracy (population std)."""

    runs: list  # RunResult per simulation
    mean_accuracy: float
    std_accuracy: float
    mean_macro_precision: float
    mean_macro_recall: float
    mean_macro_f1: float
    mean_top1_error_pct: float

    def to_dict(self) -> dict:
        return {
            "n_runs": len(self.runs),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_macro_precision": self.mean_macro_precision,
            "mean_macro_recall": self.mean_macro_recall,
            "mean_macro_f1": self.mean_macro_f1,
            "mean_top1_error_pct": self.mean_top1_error_pct,
            "runs": [
                {"seed": r.seed, "accuracy": r.report.accuracy,
                 "macro_f1": r.report.macro["f1"],
                 "top1_error_pct": r.report.top1_error_pct}
                for r in self.runs
            ],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class ComparisonTable:
    rows: list  # {"model_name", "mean_accuracy_pct", "std_accuracy_pct"}

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("model_name,mean_accuracy_pct,std_accuracy_pct\n")
            for row in self.rows:
                fh.write(
                    f"{row['model_name']},{row['mean_accuracy_pct']:.4f},"
                    f"{row['std_accuracy_pct']:.4f}\n"
                )


def _aggregate(runs: Sequence[RunResult]) -> RunAggregate:
    accs = np.array([r.report.accuracy for r in runs], dtype=np.float64)
    # population std (ddof=0); exact zero for identical runs, where the
    # mean-subtraction roundoff would otherwise leave ~1e-17 residue
    std = 0.0 if np.ptp(accs) == 0 else float(accs.std())
    return RunAggregate(
        runs=list(runs),
        mean_accuracy=float(accs.mean()),
        std_accuracy=std,
        mean_macro_precision=float(np.mean([r.report.macro["precision"] for r in runs])),
        mean_macro_recall=float(np.mean([r.report.macro["recall"] for r in runs])),
        mean_macro_f1=float(np.mean([r.report.macro["f1"] for r in runs])),
        mean_top1_error_pct=float(np.mean([r.report.top1_error_pct for r in runs])),
    )


def run_repeated(
    manifest: ds.DatasetManifest,
    ensemble_cfg: EnsembleConfig,
    train_cfg: TrainConfig,
    n_runs: int,
    base_seed: int,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    out_dir=None,
    seed_for_run: Optional[Callable[[int], int]] = None,
) -> RunAggregate:
    """Repeat split/train/evaluate n_runs times and aggregate.

    seed_for_run overrides the default base_seed + i schedule (used to
    force identical runs in tests).
    """
    if n_runs < 1:
        raise TrainingError(f"n_runs must be >= 1, got {n_runs}")
    seed_fn = seed_for_run or (lambda i: base_seed + i)
    out_dir = Path(out_dir) if out_dir is not None else None

    runs = []
    for i in range(n_runs):
        seed = seed_fn(i)
        try:
            split = ds.stratified_split(manifest.reset_splits(), test_fraction, seed)
            if val_fraction > 0:
                split = ds.carve_validation(split, val_fraction, seed)
            model = build_ensemble(ensemble_cfg, seed=seed)
            model, history = train(model, split, replace(train_cfg, seed=seed))
            true_labels, pred_labels, _ = predict_labels(model, split, "test")
            report = compute_metrics(true_labels, pred_labels, ensemble_cfg.num_classes)
        except Exception as exc:
            raise TrainingError(f"run {i} (seed {seed}) failed: {exc}") from exc
        runs.append(RunResult(seed=seed, report=report, history=history))
        if out_dir is not None:
            run_dir = out_dir / "runs" / str(i)
            run_dir.mkdir(parents=True, exist_ok=True)
            report.to_json(run_dir / "metrics.json")
            (run_dir / "history.json").write_text(
                json.dumps(history.to_dict(), indent=2) + "\n"
            )
            save_checkpoint(model, run_dir / "checkpoint.edr",
                            class_names=manifest.class_names)

    aggregate = _aggregate(runs)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        aggregate.to_json(out_dir / "aggregate.json")
    return aggregate


def compare_models(
    named_configs: Sequence[tuple],
    manifest: ds.DatasetManifest,
    train_cfg: TrainConfig,
    n_runs: int,
    base_seed: int,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    out_dir=None,
) -> ComparisonTable:
    """Evaluate (name, EnsembleConfig) pairs under identical per-run seeds.

    Splits depend only on (manifest, fraction, seed), so run i of every
    configuration sees the same train/test membership.
    """
    if not named_configs:
        raise TrainingError("compare_models needs at least one configuration")
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, cfg in named_configs:
        sub_dir = out_dir / name if out_dir is not None else None
        agg = run_repeated(
            manifest, cfg, train_cfg, n_runs, base_seed,
            test_fraction=test_fraction, val_fraction=val_fraction, out_dir=sub_dir,
        )
        rows.append({
            "model_name": name,
            "mean_accuracy_pct": 100.0 * agg.mean_accuracy,
            "std_accuracy_pct": 100.0 * agg.std_accuracy,
        })
    table = ComparisonTable(rows=rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "comparison.csv")
    return table


def emit_figures(
    history: Optional[TrainHistory],
    report: Optional[MetricsReport],
    out_dir,
    class_names: Sequence[str] = ds.DEFAULT_CLASS_NAMES,
) -> list:
    """Write accuracy/loss curves and the confusion-matrix heatmap.

    Either argument may be None to emit only the other's figures.
    Returns the list of files written.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise TrainingError(f"cannot write to {out_dir}: {exc}") from exc

    written = []
    if history is not None and history.epochs > 0:
        epochs = np.arange(1, history.epochs + 1)
        for kind, train_series, val_series in (
            ("accuracy", history.train_accuracy, history.val_accuracy),
            ("loss", history.train_loss, history.val_loss),
        ):
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(epochs, train_series, marker="o", markersize=3, label=f"train {kind}")
            if any(v is not None for v in val_series):
                ax.plot(epochs, val_series, marker="s", markersize=3, label=f"val {kind}")
            ax.set_xlabel("epoch")
            ax.set_ylabel(kind)
            ax.legend()
            fig.tight_layout()
            path = out_dir / f"{kind}_curve.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    if report is not None:
        fig, ax = plt.subplots(figsize=(6, 5))
        cm = report.confusion
        im = ax.imshow(cm, cmap="Blues")
        fig.colorbar(im, ax=ax)
        ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
        ax.set_yticks(range(len(class_names)), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        threshold = cm.max() / 2 if cm.max() > 0 else 0.5
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                        color="white" if cm[i, j] > threshold else "black")
        fig.tight_layout()
        path = out_dir / "confusion_matrix.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
