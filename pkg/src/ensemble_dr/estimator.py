"""scikit-learn style wrapper around the ensemble classifier.

Lets the model drop into sklearn tooling (get_params/set_params, clone,
scoring). X is an array of images, N x 224 x 224 x 3: float values in
[0, 1] are used as-is, uint8 images are resized/normalized first.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import dataset as ds
from .ensemble import EnsembleConfig, build_ensemble, forward
from .training import TrainConfig, train


class EnsembleClassifier(BaseEstimator, ClassifierMixin):
    """Dual-backbone feature-fusion classifier with a fit/predict surface.

    Defaults use the offline tiny backbones; pass
    backbone_names=("vgg16", "inception_v3") and pretrained=True for the
    full-scale configuration.
    """

    def __init__(
        self,
        backbone_names=("tiny_a", "tiny_b"),
        freeze_fraction=0.25,
        head_width=256,
        dropout_rate=0.5,
        pretrained=False,
        learning_rate=1e-4,
        batch_size=16,
        max_epochs=40,
        val_fraction=0.1,
        random_state=0,
    ):
        self.backbone_names = backbone_names
        self.freeze_fraction = freeze_fraction
        self.head_width = head_width
        self.dropout_rate = dropout_rate
        self.pretrained = pretrained
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _as_tensors(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[3] != 3:
            raise ValueError(f"X must be N x H x W x 3, got shape {X.shape}")
        if X.dtype == np.uint8:
            return np.stack([ds.preprocess_image(img).tensor for img in X])
        X = X.astype(np.float32, copy=False)
        if X.shape[1:3] != (ds.IMAGE_SIZE, ds.IMAGE_SIZE):
            raise ValueError(
                f"float X must already be N x {ds.IMAGE_SIZE} x {ds.IMAGE_SIZE} x 3; "
                "pass uint8 images to have them resized"
            )
        if X.min() < 0 or X.max() > 1:
            raise ValueError("float X must have values in [0, 1]")
        return X

    def _build_manifest(self, X: np.ndarray, y) -> ds.DatasetManifest:
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (len(X),):
            raise ValueError(f"y must be 1-D with len(X) entries, got shape {y.shape}")
        records = []
        cache = {}
        for i, (img, label) in enumerate(zip(X, y)):
            image_id = f"mem_{i:06d}"
            records.append(ds.ImageRecord(image_id=image_id, path=None, label=int(label)))
            cache[image_id] = img
        return ds.DatasetManifest(records=records, image_cache=cache)

    def fit(self, X, y):
        X = self._as_tensors(X)
        manifest = self._build_manifest(X, y)
        manifest = ds.stratified_split(manifest, 0.0, self.random_state)
        if self.val_fraction > 0:
            manifest = ds.carve_validation(manifest, self.val_fraction, self.random_state)

        config = EnsembleConfig(
            backbone_names=tuple(self.backbone_names),
            freeze_fraction=self.freeze_fraction,
            head_width=self.head_width,
            dropout_rate=self.dropout_rate,
            pretrained=self.pretrained,
        )
        model = build_ensemble(config, seed=self.random_state)
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.random_state,
        )
        self.model_, self.history_ = train(model, manifest, cfg)
        self.classes_ = np.arange(config.num_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        X = self._as_tensors(X)
        chunks = [
            forward(self.model_, X[i : i + self.batch_size], mode="infer")
            for i in range(0, len(X), self.batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)
