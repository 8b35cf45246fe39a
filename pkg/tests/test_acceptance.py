"""End-to-end acceptance suite.

One test per release criterion; the terminal-summary hook in conftest.py
prints a PASS/FAIL line per criterion after the run. Criterion 10 needs
the full fundus corpus plus pretrained weights and is skipped offline.
"""

import json
import time

import numpy as np
import pytest
import torch

from ensemble_dr import dataset as ds
from ensemble_dr import experiments as ex
from ensemble_dr import metrics as mt
from ensemble_dr.backbones import WEIGHTS_DIR_ENV
from ensemble_dr.ensemble import (
    EnsembleConfig,
    build_ensemble,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from ensemble_dr.training import TrainConfig, make_optimizer, train, train_step

from conftest import memory_manifest
from test_metrics import brute_force_report

TINY = EnsembleConfig(backbone_names=("tiny_a", "tiny_b"), pretrained=False)


def test_criterion_01_metric_oracle_equivalence():
    """1000 random instances: compute_metrics matches a brute-force tally."""
    start = time.monotonic()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        true_labels = rng.integers(0, 5, n).tolist()
        pred_labels = rng.integers(0, 5, n).tolist()
        report = mt.compute_metrics(true_labels, pred_labels)
        oracle = brute_force_report(true_labels, pred_labels)
        np.testing.assert_array_equal(report.confusion, oracle["confusion"])
        assert report.accuracy == pytest.approx(oracle["accuracy"], rel=1e-12)
        assert report.top1_error_pct == pytest.approx(
            oracle["top1_error_pct"], rel=1e-12, abs=1e-12
        )
        for got, want in zip(report.per_class, oracle["per_class"]):
            assert got.support == want[3]
            assert got.precision == pytest.approx(want[0], rel=1e-12, abs=1e-12)
            assert got.recall == pytest.approx(want[1], rel=1e-12, abs=1e-12)
            assert got.f1 == pytest.approx(want[2], rel=1e-12, abs=1e-12)
        assert report.macro["f1"] == pytest.approx(
            sum(pc[2] for pc in oracle["per_class"]) / 5, rel=1e-12, abs=1e-12
        )
    assert time.monotonic() - start < 10


def test_criterion_02_split_stratification():
    """500 random manifests: |test count − 0.2·n| < 1 per class, clean partition."""
    start = time.monotonic()
    rng = np.random.default_rng(1)
    for trial in range(500):
        counts = rng.integers(5, 501, size=5)
        records = [
            ds.ImageRecord(image_id=f"r{c}_{i}", path=None, label=c)
            for c in range(5)
            for i in range(counts[c])
        ]
        manifest = ds.DatasetManifest(records=records)
        seed = int(rng.integers(0, 2**31))
        split = ds.stratified_split(manifest, 0.2, seed)
        test_counts = split.split_counts("test")
        for c in range(5):
            assert abs(test_counts[c] - 0.2 * counts[c]) < 1
        assert all(r.split in ("train", "test") for r in split.records)
        assert sum(split.split_counts("train")) + sum(test_counts) == len(records)
        if trial % 25 == 0:
            again = ds.stratified_split(manifest, 0.2, seed)
            assert [r.split for r in again.records] == [r.split for r in split.records]
    assert time.monotonic() - start < 10


@pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 1.0])
def test_criterion_03_freeze_invariance(fraction):
    """20 optimizer steps leave the frozen prefix bit-identical."""
    cfg = EnsembleConfig(backbone_names=("tiny_a", "tiny_b"),
                         freeze_fraction=fraction, pretrained=False)
    model = build_ensemble(cfg, seed=0)
    frozen_before = [p.detach().clone()
                     for b in model.backbones for p in b.frozen_parameters()]
    unfrozen = [p for b in model.backbones for p in b.parameters() if p.requires_grad]
    unfrozen_before = [p.detach().clone() for p in unfrozen]
    optimizer = make_optimizer(model, TrainConfig(learning_rate=1e-3))

    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = (rng.random((4, 224, 224, 3), dtype=np.float32),
                 ds.one_hot(rng.integers(0, 5, 4)))
        train_step(model, batch, optimizer)

    frozen_after = [p for b in model.backbones for p in b.frozen_parameters()]
    for before, after in zip(frozen_before, frozen_after):
        assert torch.equal(before, after)
    if fraction < 1:
        assert any(
            not torch.equal(b, a) for b, a in zip(unfrozen_before, unfrozen)
        )


def test_criterion_04_softmax_contract():
    """200 random batches: rows nonnegative, sum to 1; infer calls repeat bitwise."""
    start = time.monotonic()
    model = build_ensemble(TINY, seed=4)
    rng = np.random.default_rng(4)
    for i in range(200):
        batch = rng.random((2, 224, 224, 3), dtype=np.float32)
        probs = forward(model, batch, mode="infer")
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        if i % 20 == 0:
            np.testing.assert_array_equal(probs, forward(model, batch, mode="infer"))
    assert time.monotonic() - start < 30


def test_criterion_05_head_gradient_check():
    """Analytic vs central finite-difference gradients through the fused head."""
    model = build_ensemble(TINY, seed=5)
    w1 = model.fc1.weight.detach().double()
    b1 = model.fc1.bias.detach().double()
    w2 = model.fc2.weight.detach().double()
    b2 = model.fc2.bias.detach().double()

    def loss_at(z, label):
        logits = torch.relu(z @ w1.T + b1) @ w2.T + b2
        return -torch.log_softmax(logits, dim=0)[label]

    rng = np.random.default_rng(5)
    for _ in range(50):
        z0 = torch.tensor(rng.normal(0, 1, model.fused_dim), dtype=torch.float64)
        label = int(rng.integers(0, 5))

        z = z0.clone().requires_grad_(True)
        loss_at(z, label).backward()
        analytic = z.grad.numpy()

        eps = 1e-6
        numeric = np.empty_like(analytic)
        for k in range(model.fused_dim):
            step = torch.zeros_like(z0)
            step[k] = eps
            numeric[k] = (
                (loss_at(z0 + step, label) - loss_at(z0 - step, label)).item()
            ) / (2 * eps)

        denom = max(np.abs(analytic).max(), 1e-8)
        assert np.abs(analytic - numeric).max() / denom < 1e-3


def test_criterion_06_cross_entropy_anchors():
    """Perfect prediction gives 0; uniform prediction gives ln 5."""
    from ensemble_dr.training import categorical_cross_entropy

    onehot = ds.one_hot([0, 1, 2, 3, 4])
    assert categorical_cross_entropy(onehot, onehot) == 0.0
    uniform = np.full((5, 5), 0.2)
    assert categorical_cross_entropy(uniform, onehot) == pytest.approx(
        np.log(5), abs=1e-9
    )


def test_criterion_07_smoke_end_to_end():
    """Full pipeline recipe on 500 separable images reaches ≥ 0.95 test accuracy."""
    start = time.monotonic()
    manifest = memory_manifest(500, seed=7)
    manifest = ds.stratified_split(manifest, 0.2, seed=7)
    manifest = ds.carve_validation(manifest, 0.1, seed=7)
    model = build_ensemble(TINY, seed=7)
    model, _ = train(model, manifest, TrainConfig(max_epochs=10, seed=7))

    true_labels, pred_labels, _ = mt.predict_labels(model, manifest, "test")
    report = mt.compute_metrics(true_labels, pred_labels)
    assert report.accuracy >= 0.95
    assert report.top1_error_pct == 100.0 * (1.0 - report.accuracy)
    for c in range(5):
        assert report.confusion[c].sum() == report.per_class[c].support
    assert time.monotonic() - start < 300


def test_criterion_08_repeated_simulation_harness(tmp_path):
    """aggregate.json mean equals the run mean; identical seeds give std 0."""
    start = time.monotonic()
    manifest = memory_manifest(50, seed=8)
    fast = TrainConfig(max_epochs=1)
    agg = ex.run_repeated(manifest, TINY, fast, n_runs=5, base_seed=8,
                          out_dir=tmp_path)
    payload = json.loads((tmp_path / "aggregate.json").read_text())
    accs = [r["accuracy"] for r in payload["runs"]]
    assert len(accs) == 5
    assert payload["mean_accuracy"] == pytest.approx(np.mean(accs), rel=1e-12)
    assert agg.mean_accuracy == payload["mean_accuracy"]

    fixed = ex.run_repeated(manifest, TINY, fast, n_runs=3, base_seed=0,
                            seed_for_run=lambda i: 17)
    assert fixed.std_accuracy == 0.0
    assert time.monotonic() - start < 600


def test_criterion_09_checkpoint_round_trip(tmp_path):
    """save → load → forward within 1e-6 of the original on a fixed batch."""
    model = build_ensemble(TINY, seed=9)
    path = tmp_path / "model.edr"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    batch = np.random.default_rng(9).random((8, 224, 224, 3), dtype=np.float32)
    diff = np.abs(forward(model, batch) - forward(loaded, batch)).max()
    assert diff <= 1e-6


def test_criterion_10_full_scale_comparison():
    """20-run pretrained comparison: needs the fundus corpus and cached weights."""
    import os

    if not os.environ.get("ENSEMBLE_DR_APTOS_DIR") or not os.environ.get(WEIGHTS_DIR_ENV):
        pytest.skip(
            "full-scale run requires the fundus image corpus "
            "(ENSEMBLE_DR_APTOS_DIR) and cached pretrained weights "
            f"({WEIGHTS_DIR_ENV}); hours of compute at full scale"
        )
    corpus = os.environ["ENSEMBLE_DR_APTOS_DIR"]
    manifest = ds.load_manifest(
        os.path.join(corpus, "train.csv"), os.path.join(corpus, "train_images")
    )
    table = ex.compare_models(
        [
            ("vgg16", EnsembleConfig(backbone_names=("vgg16",))),
            ("inception_v3", EnsembleConfig(backbone_names=("inception_v3",))),
            ("ensemble", EnsembleConfig(backbone_names=("vgg16", "inception_v3"))),
        ],
        manifest,
        TrainConfig(),
        n_runs=20,
        base_seed=0,
    )
    by_name = {r["model_name"]: r["mean_accuracy_pct"] for r in table.rows}
    assert by_name["ensemble"] > by_name["inception_v3"] > by_name["vgg16"]
    assert abs(by_name["ensemble"] - 96.4) <= 2.0
