"""Backbone registry, fractional layer freezing and feature extraction.

Backbones map a Bx224x224x3 batch to a BxH'xW'xC feature map. VGG16 and
Inception V3 come from torchvision (pretrained weights are loaded from a
local cache, never downloaded); tiny_a/tiny_b are small seeded CNNs so
every test runs offline in seconds.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import IMAGE_SIZE
from .errors import RegistryError, WeightsUnavailableError

WEIGHTS_DIR_ENV = "ENSEMBLE_DR_WEIGHTS_DIR"

REGISTRY_KEYS = ("vgg16", "inception_v3", "tiny_a", "tiny_b")

# torchvision release filenames; the hex fragment is the sha256 prefix.
_WEIGHT_FILES = {
    "vgg16": "vgg16-397923af.pth",
    "inception_v3": "inception_v3_google-0cc3c7bd.pth",
}

_TINY_SEED_OFFSET = {"tiny_a": 11, "tiny_b": 23}

_INCEPTION_STAGES = (
    "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
    "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
    "Mixed_5b", "Mixed_5c", "Mixed_5d",
    "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e",
    "Mixed_7a", "Mixed_7b", "Mixed_7c",
)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_size: tuple = (IMAGE_SIZE, IMAGE_SIZE, 3)
    feature_channels: int = 0
    layer_count: int = 0
    pretrained: bool = False


@dataclass(frozen=True)
class FreezePolicy:
    fraction: float
    frozen_layer_count: int
    layer_count: int


class FeatureExtractor(nn.Module):
    """Wraps a convolutional net with a freezing policy.

    A "layer" is a weight-bearing module (Conv2d or Linear) in
    registration order, which matches forward order for the nets built
    here. Freezing marks the earliest floor(fraction * layer_count)
    layers non-trainable; normalization layers inside the frozen prefix
    also get their running statistics pinned (kept in eval mode).
    """

    def __init__(self, name: str, net: nn.Module, feature_channels: int, pretrained: bool):
        super().__init__()
        self.net = net
        ordered = list(net.modules())
        self._weight_layers = [m for m in ordered if isinstance(m, (nn.Conv2d, nn.Linear))]
        self._ordered = ordered
        self.spec = BackboneSpec(
            name=name,
            feature_channels=feature_channels,
            layer_count=len(self._weight_layers),
            pretrained=pretrained,
        )
        self._frozen_count = 0
        self._frozen_fraction = 0.0
        self._frozen_norms: list[nn.Module] = []

    @property
    def freeze_policy(self) -> FreezePolicy:
        return FreezePolicy(
            fraction=self._frozen_fraction,
            frozen_layer_count=self._frozen_count,
            layer_count=self.spec.layer_count,
        )

    def freeze_fraction(self, fraction: float) -> FreezePolicy:
        """Freeze the earliest floor(fraction * layer_count) layers. Idempotent."""
        if not 0 <= fraction <= 1:
            raise RegistryError(f"freeze fraction must be in [0, 1], got {fraction}")
        frozen_count = math.floor(fraction * self.spec.layer_count)

        # Reset, then freeze the prefix.
        for p in self.net.parameters():
            p.requires_grad_(True)
        self._frozen_norms = []
        for layer in self._weight_layers[:frozen_count]:
            for p in layer.parameters():
                p.requires_grad_(False)

        # Norm layers registered before the first unfrozen weight layer
        # belong to the frozen prefix: freeze affine params and stats.
        boundary = len(self._ordered)
        if frozen_count < self.spec.layer_count:
            boundary = self._ordered.index(self._weight_layers[frozen_count])
        for m in self._ordered[:boundary]:
            if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
                for p in m.parameters():
                    p.requires_grad_(False)
                m.eval()
                self._frozen_norms.append(m)

        self._frozen_count = frozen_count
        self._frozen_fraction = fraction
        return self.freeze_policy

    def set_train_mode(self, training: bool) -> None:
        self.train(training)
        for m in self._frozen_norms:
            m.eval()

    def frozen_parameters(self):
        for layer in self._weight_layers[: self._frozen_count]:
            yield from layer.parameters()
        for m in self._frozen_norms:
            yield from m.parameters()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[2] != IMAGE_SIZE or x.shape[3] != IMAGE_SIZE:
            raise RegistryError(
                f"{self.spec.name}: expected input BxCx{IMAGE_SIZE}x{IMAGE_SIZE}, "
                f"got {tuple(x.shape)}"
            )
        return self.net(x)


def weights_dir() -> Path:
    override = os.environ.get(WEIGHTS_DIR_ENV)
    if override:
        return Path(override)
    return Path.home() / ".cache" / "ensemble_dr" / "weights"


def _load_pretrained_state(name: str) -> dict:
    filename = _WEIGHT_FILES[name]
    path = weights_dir() / filename
    if not path.is_file():
        raise WeightsUnavailableError(
            f"pretrained weights for {name!r} not found: expected {path}. "
            f"Place the torchvision weight file there or set ${WEIGHTS_DIR_ENV}."
        )
    match = re.search(r"-([0-9a-f]{8,})\.pth$", filename)
    if match:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if not digest.startswith(match.group(1)):
            raise WeightsUnavailableError(
                f"checksum mismatch for {path}: sha256 {digest[:8]} != {match.group(1)}"
            )
    return torch.load(path, map_location="cpu", weights_only=True)


def _build_tiny(seed: int) -> tuple[nn.Module, int]:
    # 4 stride-2 convs, channels 3 -> 4 -> 4 -> 8 -> 8; 224 -> 14 spatial.
    torch.manual_seed(seed)
    net = nn.Sequential(
        nn.Conv2d(3, 4, kernel_size=3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(4, 4, kernel_size=3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(4, 8, kernel_size=3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(8, 8, kernel_size=3, stride=2, padding=1), nn.ReLU(),
    )
    # Amplifying init: random features must carry enough signal for the
    # low-lr recipe to separate easy classes within a few epochs (the
    # default init attenuates activations badly over four layers).
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            m.weight.data.mul_(2.5)
            nn.init.zeros_(m.bias)
    return net, 8


def _build_vgg16(pretrained: bool, seed: int) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    torch.manual_seed(seed)
    model = tvm.vgg16(weights=None)
    if pretrained:
        model.load_state_dict(_load_pretrained_state("vgg16"))
    return model.features, 512


def _build_inception_v3(pretrained: bool, seed: int) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    torch.manual_seed(seed)
    model = tvm.inception_v3(weights=None, aux_logits=True, init_weights=not pretrained)
    if pretrained:
        model.load_state_dict(_load_pretrained_state("inception_v3"))
    # Keep only the convolutional trunk, in forward order.
    net = nn.Sequential(OrderedDict((s, getattr(model, s)) for s in _INCEPTION_STAGES))
    return net, 2048


def registry_get(name: str, pretrained: bool, seed: int = 0) -> FeatureExtractor:
    """Build a backbone by registry key.

    pretrained=True loads ImageNet weights from the local cache and fails
    loudly if they are absent; pretrained=False is a seeded random init.
    """
    if name not in REGISTRY_KEYS:
        raise RegistryError(f"unknown backbone {name!r}; registry keys: {list(REGISTRY_KEYS)}")
    if name in _TINY_SEED_OFFSET:
        if pretrained:
            raise RegistryError(f"{name!r} is a test backbone and is never pretrained")
        net, channels = _build_tiny(seed * 1_000_003 + _TINY_SEED_OFFSET[name])
    elif name == "vgg16":
        net, channels = _build_vgg16(pretrained, seed)
    else:
        net, channels = _build_inception_v3(pretrained, seed)
    return FeatureExtractor(name, net, channels, pretrained)


def apply_freeze(backbone: FeatureExtractor, fraction: float) -> FreezePolicy:
    return backbone.freeze_fraction(fraction)


def extract_features(backbone: FeatureExtractor, batch: np.ndarray) -> np.ndarray:
    """Inference-mode feature maps for a Bx224x224x3 batch, as BxH'xW'xC."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise RegistryError(
            f"{backbone.spec.name}: expected batch Bx{IMAGE_SIZE}x{IMAGE_SIZE}x3, "
            f"got {batch.shape}"
        )
    backbone.set_train_mode(False)
    with torch.no_grad():
        x = torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()
        fm = backbone(x)
    return fm.permute(0, 2, 3, 1).contiguous().numpy()
