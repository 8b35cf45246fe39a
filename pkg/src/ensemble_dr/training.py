"""Training loop: mini-batch Adam on the unfrozen parameters.

Deterministic given (seed, data, initial weights) under single-threaded
execution; the loop pins torch to one thread for its duration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import dataset as ds
from .ensemble import EnsembleModel, _to_torch_batch
from .errors import ConfigError, TrainingError

PROB_FLOOR = 1e-7


@dataclass
class TrainConfig:
    """Training recipe (defaults: lr 1e-4, batch 16, 40 epochs, Adam,
    categorical cross-entropy)."""

    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 40
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    loss: str = "categorical_cross_entropy"
    seed: int = 0
    keep_best_val: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "categorical_cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "optimizer": self.optimizer,
            "loss": self.loss,
            "seed": self.seed,
            "keep_best_val": self.keep_best_val,
        }


@dataclass
class TrainHistory:
    """Per-epoch curves. val_* entries are None when no val split exists."""

    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(
            train_loss=list(d["train_loss"]),
            train_accuracy=list(d["train_accuracy"]),
            val_loss=list(d["val_loss"]),
            val_accuracy=list(d["val_accuracy"]),
            wall_time=list(d.get("wall_time", [])),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
            for i in range(self.epochs):
                vl = "" if self.val_loss[i] is None else f"{self.val_loss[i]:.8f}"
                va = "" if self.val_accuracy[i] is None else f"{self.val_accuracy[i]:.8f}"
                fh.write(
                    f"{i + 1},{self.train_loss[i]:.8f},{self.train_accuracy[i]:.8f},{vl},{va}\n"
                )


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over the batch of -log p(true class), probabilities clamped
    to [1e-7, 1] before the log."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise TrainingError(f"shape mismatch: probs {probs.shape} vs onehot {onehot.shape}")
    clipped = np.clip(probs, PROB_FLOOR, 1.0)
    return float(-(onehot * np.log(clipped)).sum(axis=1).mean())


def _cce_torch(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    clipped = probs.clamp(PROB_FLOOR, 1.0)
    return -(onehot * clipped.log()).sum(dim=1).mean()


def make_optimizer(model: EnsembleModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.trainable_parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.epsilon,
    )


def train_step(
    model: EnsembleModel,
    batch: tuple,
    optimizer: torch.optim.Optimizer,
) -> tuple[float, int]:
    """One forward/backward/Adam update. Returns (batch loss, #correct)."""
    images, onehot = batch
    x = _to_torch_batch(images)
    y = torch.from_numpy(np.asarray(onehot, dtype=np.float32))
    model.set_train_mode(True)
    optimizer.zero_grad(set_to_none=True)
    probs = model(x)
    loss = _cce_torch(probs, y)
    loss.backward()
    optimizer.step()
    correct = int((probs.argmax(dim=1) == y.argmax(dim=1)).sum())
    return float(loss.detach()), correct


def evaluate_split(
    model: EnsembleModel,
    data: ds.DatasetManifest,
    split: str,
    batch_size: int = 32,
) -> tuple[float, float]:
    """(mean loss, accuracy) over a split in infer mode."""
    model.set_train_mode(False)
    total_loss = 0.0
    total_correct = 0
    n = 0
    with torch.no_grad():
        for images, onehot in ds.batch_iterator(data, split, batch_size):
            x = _to_torch_batch(images)
            y = torch.from_numpy(onehot)
            probs = model(x)
            total_loss += float(_cce_torch(probs, y)) * len(images)
            total_correct += int((probs.argmax(dim=1) == y.argmax(dim=1)).sum())
            n += len(images)
    return total_loss / n, total_correct / n


def train(
    model: EnsembleModel,
    data: ds.DatasetManifest,
    cfg: TrainConfig,
    epoch_callback: Optional[Callable[[int, EnsembleModel, TrainHistory], None]] = None,
) -> tuple[EnsembleModel, TrainHistory]:
    """Run the full recipe on the manifest's train split.

    The val split (if present) is evaluated in infer mode at each epoch
    end. With keep_best_val, the weights with the best val accuracy are
    restored at the end; otherwise final-epoch weights are the product.
    """
    n_train = len(data.split_records("train"))
    if n_train == 0:
        raise TrainingError("train split is empty")
    has_val = len(data.split_records("val")) > 0

    history = TrainHistory()
    torch.manual_seed(cfg.seed)
    epoch_seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.max_epochs)
    optimizer = make_optimizer(model, cfg)

    best_val = -1.0
    best_state = None
    saved_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for epoch in range(cfg.max_epochs):
            start = time.monotonic()
            epoch_loss = 0.0
            epoch_correct = 0
            batches = ds.batch_iterator(
                data, "train", cfg.batch_size, shuffle_seed=int(epoch_seeds[epoch])
            )
            for batch_idx, batch in enumerate(batches):
                loss, correct = train_step(model, batch, optimizer)
                if not math.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss} at epoch {epoch + 1}, batch {batch_idx + 1}"
                    )
                epoch_loss += loss * len(batch[0])
                epoch_correct += correct

            history.train_loss.append(epoch_loss / n_train)
            history.train_accuracy.append(epoch_correct / n_train)
            if has_val:
                val_loss, val_acc = evaluate_split(model, data, "val", cfg.batch_size)
                history.val_loss.append(val_loss)
                history.val_accuracy.append(val_acc)
                if cfg.keep_best_val and val_acc > best_val:
                    best_val = val_acc
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                history.val_loss.append(None)
                history.val_accuracy.append(None)
            history.wall_time.append(time.monotonic() - start)
            if epoch_callback is not None:
                epoch_callback(epoch, model, history)
    finally:
        torch.set_num_threads(saved_threads)

    if cfg.keep_best_val and best_state is not None:
        model.load_state_dict(best_state)
    return model, history
