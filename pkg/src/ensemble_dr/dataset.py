"""Dataset ingestion, preprocessing and stratified splitting.

A labelled image collection is described by a :class:`DatasetManifest`
holding one :class:`ImageRecord` per image. Splitting never touches the
filesystem; images are only decoded when batches are drawn.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DatasetError, PreprocessError

IMAGE_SIZE = 224
NUM_CLASSES = 5
SPLITS = ("train", "val", "test", "unassigned")

# Diagnosis-code order of the APTOS 2019 labels (0 = healthy).
DEFAULT_CLASS_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferate DR")

_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class ImageRecord:
    """One labelled image. ``path`` is None for in-memory datasets."""

    image_id: str
    path: Optional[Path]
    label: int
    split: str = "unassigned"

    def __post_init__(self):
        if self.label not in range(NUM_CLASSES):
            raise DatasetError(
                f"label {self.label} for {self.image_id!r} outside [0, {NUM_CLASSES - 1}]"
            )
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r} for {self.image_id!r}")


@dataclass
class DatasetManifest:
    """Inventory of labelled images plus their split assignments."""

    records: list[ImageRecord]
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES
    # Split bookkeeping (seed / fractions) so a snapshot is reconstructible.
    provenance: dict = field(default_factory=dict)
    # Preprocessed tensors keyed by image_id, for datasets built in memory.
    image_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        names = list(self.class_names)
        if len(names) != NUM_CLASSES or len(set(names)) != NUM_CLASSES:
            raise DatasetError(f"class_names must be {NUM_CLASSES} distinct names, got {names}")
        self.class_names = tuple(names)

    @property
    def class_counts(self) -> list[int]:
        counts = [0] * NUM_CLASSES
        for rec in self.records:
            counts[rec.label] += 1
        return counts

    def split_records(self, split: str) -> list[ImageRecord]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def split_counts(self, split: str) -> list[int]:
        counts = [0] * NUM_CLASSES
        for rec in self.split_records(split):
            counts[rec.label] += 1
        return counts

    def copy(self) -> "DatasetManifest":
        return DatasetManifest(
            records=[ImageRecord(r.image_id, r.path, r.label, r.split) for r in self.records],
            class_names=self.class_names,
            provenance=dict(self.provenance),
            image_cache=self.image_cache,
        )

    def reset_splits(self) -> "DatasetManifest":
        out = self.copy()
        for rec in out.records:
            rec.split = "unassigned"
        out.provenance = {}
        return out

    def to_json(self, path) -> None:
        doc = {
            "class_names": list(self.class_names),
            "seed": self.provenance.get("seed"),
            "fractions": {
                "test": self.provenance.get("test_fraction"),
                "val": self.provenance.get("val_fraction"),
            },
            "records": [
                {
                    "id": r.image_id,
                    "path": str(r.path) if r.path is not None else None,
                    "label": r.label,
                    "split": r.split,
                }
                for r in self.records
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        records = [
            ImageRecord(
                image_id=r["id"],
                path=Path(r["path"]) if r.get("path") else None,
                label=int(r["label"]),
                split=r.get("split", "unassigned"),
            )
            for r in doc["records"]
        ]
        provenance = {}
        if doc.get("seed") is not None:
            provenance["seed"] = doc["seed"]
        fractions = doc.get("fractions") or {}
        if fractions.get("test") is not None:
            provenance["test_fraction"] = fractions["test"]
        if fractions.get("val") is not None:
            provenance["val_fraction"] = fractions["val"]
        return cls(records=records, class_names=doc["class_names"], provenance=provenance)


@dataclass
class PreprocessedImage:
    """224x224x3 float tensor in [0, 1] plus the id it came from."""

    tensor: np.ndarray
    source_id: str


def load_manifest(labels_file, image_dir, class_names=DEFAULT_CLASS_NAMES) -> DatasetManifest:
    """Read an APTOS-style ``id_code,diagnosis`` CSV and locate its images.

    Every row must have a matching ``<id_code>.<ext>`` file under
    ``image_dir``. Records come back sorted by image_id with
    split=unassigned.
    """
    labels_file = Path(labels_file)
    image_dir = Path(image_dir)
    if not labels_file.is_file():
        raise DatasetError(f"labels file not found: {labels_file}")
    if not image_dir.is_dir():
        raise DatasetError(f"image directory not found: {image_dir}")

    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(labels_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id_code", "diagnosis"]:
            raise DatasetError(
                f"{labels_file}: line 1: expected header 'id_code,diagnosis', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DatasetError(f"{labels_file}: line {lineno}: expected 2 columns, got {len(row)}")
            id_code = row[0].strip()
            try:
                diagnosis = int(row[1])
            except ValueError:
                raise DatasetError(
                    f"{labels_file}: line {lineno}: diagnosis {row[1]!r} is not an integer"
                ) from None
            if diagnosis not in range(NUM_CLASSES):
                raise DatasetError(
                    f"{labels_file}: line {lineno}: diagnosis {diagnosis} outside [0, 4]"
                )
            if id_code in seen:
                raise DatasetError(f"{labels_file}: line {lineno}: duplicate id_code {id_code!r}")
            seen.add(id_code)
            path = _find_image(image_dir, id_code)
            if path is None:
                raise DatasetError(f"no image file for id_code {id_code!r} under {image_dir}")
            records.append(ImageRecord(image_id=id_code, path=path, label=diagnosis))

    records.sort(key=lambda r: r.image_id)
    return DatasetManifest(records=records, class_names=class_names)


def _find_image(image_dir: Path, id_code: str) -> Optional[Path]:
    for ext in _IMAGE_EXTENSIONS:
        candidate = image_dir / f"{id_code}{ext}"
        if candidate.is_file():
            return candidate
    return None


def preprocess_image(raw: np.ndarray, source_id: str = "") -> PreprocessedImage:
    """Bilinear-resize an HxWx3 8-bit image to 224x224 and scale to [0, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise PreprocessError(
            f"expected HxWx3 image, got shape {raw.shape}; "
            "convert grayscale/alpha images to 3-channel RGB first"
        )
    if raw.shape[0] < 1 or raw.shape[1] < 1:
        raise PreprocessError(f"empty image, shape {raw.shape}")
    img = Image.fromarray(raw.astype(np.uint8), mode="RGB")
    resized = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    tensor = np.asarray(resized, dtype=np.float32) / 255.0
    return PreprocessedImage(tensor=tensor, source_id=source_id)


def _largest_remainder_counts(counts: Sequence[int], fraction: float) -> list[int]:
    """Per-class take counts: floor(fraction*n) plus largest-remainder top-up
    so the total equals round(fraction * sum(counts))."""
    exact = [fraction * c for c in counts]
    base = [math.floor(e) for e in exact]
    target = round(fraction * sum(counts))
    shortfall = target - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:max(shortfall, 0)]:
        base[i] += 1
    return base


def stratified_split(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    """Assign train/test splits, stratified per class.

    Deterministic in (manifest, test_fraction, seed). Per-class test counts
    follow largest-remainder rounding of test_fraction * class_count.
    """
    if not 0 <= test_fraction < 1:
        raise DatasetError(f"test_fraction must be in [0, 1), got {test_fraction}")
    counts = manifest.class_counts
    if test_fraction > 0 and any(c == 0 for c in counts):
        empty = [manifest.class_names[i] for i, c in enumerate(counts) if c == 0]
        raise DatasetError(f"cannot stratify: classes with no records: {empty}")

    take = _largest_remainder_counts(counts, test_fraction)
    for cls, (n, k) in enumerate(zip(counts, take)):
        if n > 0 and k >= n:
            raise DatasetError(
                f"class {manifest.class_names[cls]!r} would receive 0 train records"
            )

    out = manifest.copy()
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ImageRecord]] = {c: [] for c in range(NUM_CLASSES)}
    for rec in out.records:
        rec.split = "train"
        by_class[rec.label].append(rec)
    for cls in range(NUM_CLASSES):
        recs = by_class[cls]
        if not recs:
            continue
        order = rng.permutation(len(recs))
        for idx in order[: take[cls]]:
            recs[idx].split = "test"
    out.provenance = {"seed": seed, "test_fraction": test_fraction}
    return out


def carve_validation(manifest: DatasetManifest, val_fraction: float, seed: int) -> DatasetManifest:
    """Reassign a stratified val_fraction of the train records to val.

    Test records are never touched.
    """
    if not 0 <= val_fraction < 1:
        raise DatasetError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if all(r.split == "unassigned" for r in manifest.records) and manifest.records:
        raise DatasetError("carve_validation requires a manifest with splits assigned")

    out = manifest.copy()
    if val_fraction == 0:
        out.provenance["val_fraction"] = 0.0
        return out

    train = [r for r in out.records if r.split == "train"]
    counts = [0] * NUM_CLASSES
    for rec in train:
        counts[rec.label] += 1
    take = _largest_remainder_counts(counts, val_fraction)
    for cls, (n, k) in enumerate(zip(counts, take)):
        if n > 0 and k >= n:
            raise DatasetError(
                f"class {out.class_names[cls]!r} would receive 0 train records"
            )

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ImageRecord]] = {c: [] for c in range(NUM_CLASSES)}
    for rec in train:
        by_class[rec.label].append(rec)
    for cls in range(NUM_CLASSES):
        recs = by_class[cls]
        if not recs:
            continue
        order = rng.permutation(len(recs))
        for idx in order[: take[cls]]:
            recs[idx].split = "val"
    out.provenance["val_fraction"] = val_fraction
    return out


def one_hot(labels: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_record_tensor(manifest: DatasetManifest, record: ImageRecord) -> np.ndarray:
    """Preprocessed 224x224x3 tensor for a record (cache first, then disk)."""
    cached = manifest.image_cache.get(record.image_id)
    if cached is not None:
        return cached
    if record.path is None:
        raise DatasetError(f"record {record.image_id!r} has no path and is not cached")
    try:
        with Image.open(record.path) as img:
            raw = np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise DatasetError(f"cannot read image {record.path}: {exc}") from exc
    return preprocess_image(raw, source_id=record.image_id).tensor


def batch_iterator(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, one-hot labels) batches covering the split once.

    Order is manifest order, or a permutation determined by shuffle_seed.
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    records = manifest.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} is empty")
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
        records = [records[i] for i in order]
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([load_record_tensor(manifest, r) for r in chunk])
        labels = one_hot([r.label for r in chunk])
        yield images, labels
