import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_dr import dataset as ds
from ensemble_dr.errors import DatasetError, PreprocessError

from conftest import memory_manifest, write_disk_dataset

# Published per-class counts of the corpus this pipeline targets,
# keyed by diagnosis code (0=No DR, 1=Mild, 2=Moderate, 3=Severe,
# 4=Proliferate).
APTOS_COUNTS = {0: 1805, 1: 1624, 2: 999, 3: 834, 4: 772}


def counts_manifest(counts) -> ds.DatasetManifest:
    records = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            records.append(ds.ImageRecord(image_id=f"r{i:05d}", path=None, label=label))
            i += 1
    return ds.DatasetManifest(records=records)


class TestLoadManifest:
    def test_loads_and_sorts(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=15, seed=0)
        manifest = ds.load_manifest(labels, images)
        assert len(manifest.records) == 15
        ids = [r.image_id for r in manifest.records]
        assert ids == sorted(ids)
        assert manifest.class_counts == [3, 3, 3, 3, 3]
        assert all(r.split == "unassigned" for r in manifest.records)

    def test_empty_csv(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=1, seed=0)
        labels.write_text("id_code,diagnosis\n")
        manifest = ds.load_manifest(labels, images)
        assert manifest.records == []
        assert manifest.class_counts == [0, 0, 0, 0, 0]

    def test_one_per_class(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=5, seed=0)
        manifest = ds.load_manifest(labels, images)
        assert manifest.class_counts == [1, 1, 1, 1, 1]

    def test_missing_image_names_id(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=5, seed=0)
        (images / "img0002.png").unlink()
        with pytest.raises(DatasetError, match="img0002"):
            ds.load_manifest(labels, images)

    def test_bad_diagnosis(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=5, seed=0)
        labels.write_text("id_code,diagnosis\nimg0000,7\n")
        with pytest.raises(DatasetError, match="line 2"):
            ds.load_manifest(labels, images)

    def test_duplicate_id(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=5, seed=0)
        labels.write_text("id_code,diagnosis\nimg0000,0\nimg0000,1\n")
        with pytest.raises(DatasetError, match="duplicate"):
            ds.load_manifest(labels, images)

    def test_bad_header(self, tmp_path):
        labels, images = write_disk_dataset(tmp_path, n=5, seed=0)
        labels.write_text("image,label\nimg0000,0\n")
        with pytest.raises(DatasetError, match="header"):
            ds.load_manifest(labels, images)


class TestPreprocess:
    @pytest.mark.parametrize(
        "value,expected",
        [(255, 1.0), (0, 0.0), (128, 128 / 255)],
    )
    def test_uniform_values(self, value, expected):
        raw = np.full((37, 51, 3), value, dtype=np.uint8)
        out = ds.preprocess_image(raw)
        assert out.tensor.shape == (224, 224, 3)
        np.testing.assert_allclose(out.tensor, expected, atol=1e-7)

    def test_range_and_shape(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(100, 160, 3), dtype=np.uint8)
        out = ds.preprocess_image(raw)
        assert out.tensor.shape == (224, 224, 3)
        assert out.tensor.min() >= 0.0 and out.tensor.max() <= 1.0

    def test_grayscale_rejected(self):
        with pytest.raises(PreprocessError, match="3-channel"):
            ds.preprocess_image(np.zeros((10, 10), dtype=np.uint8))

    def test_alpha_rejected(self):
        with pytest.raises(PreprocessError, match="3-channel"):
            ds.preprocess_image(np.zeros((10, 10, 4), dtype=np.uint8))


class TestStratifiedSplit:
    def test_aptos_counts(self):
        # Independent arithmetic: floor(0.2*n) per class, then largest
        # remainders top up to round(0.2*N) = 1207.
        manifest = counts_manifest(APTOS_COUNTS)
        split = ds.stratified_split(manifest, 0.2, seed=1)
        test_counts = split.split_counts("test")
        assert test_counts == [361, 325, 200, 167, 154]
        assert sum(test_counts) == 1207

    def test_zero_fraction(self):
        manifest = memory_manifest(20, seed=0)
        split = ds.stratified_split(manifest, 0.0, seed=0)
        assert split.split_counts("test") == [0] * 5
        assert sum(split.split_counts("train")) == 20

    def test_determinism(self):
        manifest = memory_manifest(50, seed=0)
        a = ds.stratified_split(manifest, 0.2, seed=7)
        b = ds.stratified_split(manifest, 0.2, seed=7)
        assert [r.split for r in a.records] == [r.split for r in b.records]

    def test_different_seed_differs(self):
        manifest = memory_manifest(200, seed=0)
        a = ds.stratified_split(manifest, 0.2, seed=1)
        b = ds.stratified_split(manifest, 0.2, seed=2)
        assert [r.split for r in a.records] != [r.split for r in b.records]

    def test_fraction_one_rejected(self):
        with pytest.raises(DatasetError):
            ds.stratified_split(memory_manifest(10, seed=0), 1.0, seed=0)

    def test_class_starvation_rejected(self):
        records = [ds.ImageRecord(f"r{i}", None, i % 5) for i in range(5)]
        manifest = ds.DatasetManifest(records=records)
        with pytest.raises(DatasetError, match="0 train"):
            ds.stratified_split(manifest, 0.9, seed=0)

    @given(
        counts=st.lists(st.integers(min_value=2, max_value=200), min_size=5, max_size=5),
        fraction=st.floats(min_value=0.05, max_value=0.5),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, counts, fraction, seed):
        manifest = counts_manifest(dict(enumerate(counts)))
        try:
            split = ds.stratified_split(manifest, fraction, seed)
        except DatasetError:
            return  # starvation case, rejected by contract
        test_counts = split.split_counts("test")
        for c in range(5):
            assert abs(test_counts[c] - fraction * counts[c]) < 1
        for rec in split.records:
            assert rec.split in ("train", "test")


class TestCarveValidation:
    def test_zero_fraction_noop(self):
        split = ds.stratified_split(memory_manifest(50, seed=0), 0.2, seed=0)
        carved = ds.carve_validation(split, 0.0, seed=0)
        assert carved.split_counts("val") == [0] * 5

    def test_exact_division(self):
        manifest = counts_manifest({c: 100 for c in range(5)})
        split = ds.stratified_split(manifest, 0.0, seed=0)
        carved = ds.carve_validation(split, 0.1, seed=0)
        assert carved.split_counts("val") == [10] * 5
        assert carved.split_counts("train") == [90] * 5

    def test_test_records_untouched(self):
        split = ds.stratified_split(memory_manifest(100, seed=0), 0.2, seed=0)
        before = {r.image_id for r in split.split_records("test")}
        carved = ds.carve_validation(split, 0.25, seed=4)
        after = {r.image_id for r in carved.split_records("test")}
        assert before == after

    def test_requires_assigned_splits(self):
        with pytest.raises(DatasetError, match="splits assigned"):
            ds.carve_validation(memory_manifest(10, seed=0), 0.1, seed=0)


class TestBatchIterator:
    def test_batch_sizes(self):
        manifest = memory_manifest(33, seed=0)
        split = ds.stratified_split(manifest, 0.0, seed=0)
        sizes = [len(x) for x, _ in ds.batch_iterator(split, "train", 16)]
        assert sizes == [16, 16, 1]

    def test_one_hot(self):
        np.testing.assert_array_equal(ds.one_hot([3])[0], [0, 0, 0, 1, 0])

    def test_shuffle_determinism(self):
        manifest = ds.stratified_split(memory_manifest(30, seed=0), 0.0, seed=0)
        a = [y.argmax(axis=1).tolist() for _, y in ds.batch_iterator(manifest, "train", 8, 11)]
        b = [y.argmax(axis=1).tolist() for _, y in ds.batch_iterator(manifest, "train", 8, 11)]
        assert a == b

    def test_round_trip_multiset(self):
        manifest = ds.stratified_split(memory_manifest(25, seed=0), 0.0, seed=0)
        labels = []
        for _, y in ds.batch_iterator(manifest, "train", 7, shuffle_seed=5):
            labels.extend(y.argmax(axis=1).tolist())
        assert sorted(labels) == sorted(r.label for r in manifest.records)

    def test_empty_split_rejected(self):
        manifest = ds.stratified_split(memory_manifest(10, seed=0), 0.0, seed=0)
        with pytest.raises(DatasetError, match="empty"):
            list(ds.batch_iterator(manifest, "test", 4))


class TestManifestJson:
    def test_round_trip(self, tmp_path):
        manifest = ds.stratified_split(memory_manifest(20, seed=0), 0.2, seed=9)
        manifest = ds.carve_validation(manifest, 0.1, seed=9)
        path = tmp_path / "manifest.json"
        manifest.to_json(path)
        loaded = ds.DatasetManifest.from_json(path)
        assert [r.image_id for r in loaded.records] == [r.image_id for r in manifest.records]
        assert [r.split for r in loaded.records] == [r.split for r in manifest.records]
        assert loaded.provenance["seed"] == 9
        assert loaded.provenance["test_fraction"] == 0.2
