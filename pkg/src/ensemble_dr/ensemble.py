"""Two-backbone ensemble: GAP per backbone, concatenation, shared head.

The head is dense(fused_dim -> head_width, ReLU) -> dropout ->
dense(head_width -> num_classes, softmax). Checkpoints are a single
binary file: magic, JSON header (format version, config, class names,
optional metric snapshot), then named weight arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbones import FeatureExtractor, registry_get
from .dataset import IMAGE_SIZE
from .errors import CheckpointError, RegistryError

_CHECKPOINT_MAGIC = b"EDRCKPT\x01"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnsembleConfig:
    """Architecture knobs. Two backbones is the standard configuration;
    a single backbone is allowed as the baseline used in model comparisons."""

    backbone_names: tuple = ("vgg16", "inception_v3")
    freeze_fraction: float = 0.25
    head_width: int = 256
    dropout_rate: float = 0.5
    num_classes: int = 5
    pretrained: bool = True

    def __post_init__(self):
        object.__setattr__(self, "backbone_names", tuple(self.backbone_names))
        if not 1 <= len(self.backbone_names) <= 2:
            raise RegistryError(
                f"expected 1 or 2 backbones, got {list(self.backbone_names)}"
            )
        if self.head_width < 1:
            raise RegistryError(f"head_width must be >= 1, got {self.head_width}")
        if self.num_classes < 2:
            raise RegistryError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.dropout_rate < 1:
            raise RegistryError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.freeze_fraction <= 1:
            raise RegistryError(
                f"freeze_fraction must be in [0, 1], got {self.freeze_fraction}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_names"] = list(self.backbone_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        return cls(**d)


class EnsembleModel(nn.Module):
    """Frozen-backbone feature fusion plus a trainable classification head."""

    def __init__(self, config: EnsembleConfig, extractors: Sequence[FeatureExtractor]):
        super().__init__()
        self.config = config
        self.backbones = nn.ModuleList(extractors)
        self.fused_dim = sum(e.spec.feature_channels for e in extractors)
        self.fc1 = nn.Linear(self.fused_dim, config.head_width)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.fc2 = nn.Linear(config.head_width, config.num_classes)

    def fused_features(self, x: torch.Tensor) -> torch.Tensor:
        # GAP each backbone's BxCxH'xW' map to BxC, then concatenate in
        # config order.
        pooled = [b(x).mean(dim=(2, 3)) for b in self.backbones]
        return torch.cat(pooled, dim=1)

    def head(self, fused: torch.Tensor) -> torch.Tensor:
        hidden = self.dropout(F.relu(self.fc1(fused)))
        return F.softmax(self.fc2(hidden), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.fused_features(x))

    def set_train_mode(self, training: bool) -> None:
        self.train(training)
        for b in self.backbones:
            b.set_train_mode(training)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_ensemble(config: EnsembleConfig, seed: int = 0) -> EnsembleModel:
    """Instantiate backbones, apply the freeze fraction, attach the head.

    Head weights use torch's seeded uniform fan-in init.
    """
    extractors = []
    for i, name in enumerate(config.backbone_names):
        ext = registry_get(name, config.pretrained, seed=seed + i)
        ext.freeze_fraction(config.freeze_fraction)
        extractors.append(ext)
    torch.manual_seed(seed)
    return EnsembleModel(config, extractors)


def _to_torch_batch(batch: np.ndarray) -> torch.Tensor:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise RegistryError(
            f"expected batch Bx{IMAGE_SIZE}x{IMAGE_SIZE}x3, got {batch.shape}"
        )
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def forward(model: EnsembleModel, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Class probabilities for a Bx224x224x3 batch.

    mode="infer" disables dropout and is deterministic; mode="train"
    samples dropout from the torch global RNG.
    """
    if mode not in ("train", "infer"):
        raise RegistryError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _to_torch_batch(batch)
    model.set_train_mode(mode == "train")
    with torch.no_grad():
        probs = model(x)
    return probs.numpy()


def global_average_pool(feature_map: np.ndarray) -> np.ndarray:
    """Reduce BxH'xW'xC to BxC by averaging over the spatial grid."""
    feature_map = np.asarray(feature_map)
    if feature_map.ndim != 4:
        raise RegistryError(f"expected BxHxWxC feature map, got shape {feature_map.shape}")
    return feature_map.mean(axis=(1, 2))


def save_checkpoint(
    model: EnsembleModel,
    path,
    class_names: Optional[Sequence[str]] = None,
    metrics: Optional[dict] = None,
) -> None:
    state = model.state_dict()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "class_names": list(class_names) if class_names else None,
        "metrics": metrics,
        "arrays": len(state),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name, tensor in state.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            np.lib.format.write_array(fh, tensor.numpy(), allow_pickle=False)


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not an ensemble checkpoint (bad magic)")
        (length,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return header


def load_checkpoint(path) -> EnsembleModel:
    """Rebuild the model from a checkpoint; infer-mode outputs match the
    saved model to within float round-off."""
    header = read_checkpoint_header(path)
    config = EnsembleConfig.from_dict(header["config"])
    # Weights come from the file, so never touch the pretrained cache.
    model = build_ensemble(replace(config, pretrained=False), seed=0)
    model.config = config

    state = {}
    with open(path, "rb") as fh:
        fh.seek(len(_CHECKPOINT_MAGIC))
        (length,) = struct.unpack("<Q", fh.read(8))
        fh.seek(length, 1)
        try:
            for _ in range(header["arrays"]):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                state[name] = torch.from_numpy(np.lib.format.read_array(fh, allow_pickle=False))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt weight section: {exc}") from exc
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match config: {exc}") from exc
    return model
