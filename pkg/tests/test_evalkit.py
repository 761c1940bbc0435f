"""IoU, binarization, evaluation, and the experiment drivers."""

import numpy as np
import pytest

from roadseg import datastore, micronet, synthworld
from roadseg.evalkit import (
    COND_DENSE,
    COND_MIX,
    COND_SPARSE,
    ExperimentReport,
    binarize,
    evaluate,
    iou,
    run_conditions,
    run_ratio_sweep,
    save_overlays,
)
from roadseg.losskernel import PredictionPlane


def brute_force_iou(a, b):
    """Independent double-loop pixel count."""
    inter = union = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            pa, pb = bool(a[i, j]), bool(b[i, j])
            inter += pa and pb
            union += pa or pb
    return 1.0 if union == 0 else inter / union


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalds")
    return synthworld.generate_dataset(
        n_scenes=10, variation=synthworld.VariationConfig(),
        cam=synthworld.default_intrinsics(64), lidar=synthworld.LidarSpec(),
        out_dir=out, seed=17, val_fraction=0.3,
    )


class TestIou:
    def test_identical_masks(self):
        m = (np.arange(16).reshape(4, 4) % 3 == 0).astype(np.uint8)
        assert iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert iou(a, b) == 0.0

    def test_partial_overlap_hand_count(self):
        # 50 + 50 pixels with 25 overlapping: 25 / 75
        a = np.zeros((10, 10), dtype=np.uint8)
        b = np.zeros((10, 10), dtype=np.uint8)
        a.reshape(-1)[:50] = 1
        b.reshape(-1)[25:75] = 1
        assert abs(iou(a, b) - 25 / 75) < 1e-15

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert iou(z, z) == 1.0

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = (rng.random((32, 32)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
            b = (rng.random((32, 32)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
            assert iou(a, b) == brute_force_iou(a, b)
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            iou(np.zeros((2, 2)), np.zeros((3, 3)))


class TestBinarize:
    def test_below_threshold_empty(self):
        pred = PredictionPlane(probs=np.full((4, 4), 0.4))
        assert binarize(pred, 0.5).sum() == 0

    def test_above_threshold_full(self):
        pred = PredictionPlane(probs=np.full((4, 4), 0.6))
        assert binarize(pred, 0.5).sum() == 16

    def test_threshold_at_value_included(self):
        pred = PredictionPlane(probs=np.full((2, 2), 0.5))
        assert binarize(pred, 0.5).sum() == 4

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        pred = PredictionPlane(probs=rng.random((16, 16)) * 0.98 + 0.01)
        prev = binarize(pred, 0.1)
        for th in (0.3, 0.5, 0.7, 0.9):
            cur = binarize(pred, th)
            assert np.all(cur <= prev)
            prev = cur

    def test_threshold_bounds(self):
        pred = PredictionPlane(probs=np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            binarize(pred, 0.0)


class TestEvaluate:
    def test_constant_negative_model_scores_zero(self, small_dataset):
        net = micronet.MicroNet(seed=0)
        for conv in net.convs:
            conv.weight[:] = 0.0
            conv.bias[:] = 0.0
        net.convs[-1].bias[:] = -10.0  # always predicts non-road
        assert evaluate(net, small_dataset) == 0.0

    def test_perfect_model_scores_one(self, tmp_path):
        # All-road ground truth plus a constant-positive model: IoU 1.0.
        from roadseg.maskgen import densify, save_ground_truth, save_mask_png
        from PIL import Image

        frames = []
        for i in range(2):
            img = (np.full((64, 64, 3), 0.5) * 255).astype(np.uint8)
            Image.fromarray(img, mode="RGB").save(tmp_path / f"{i}.png")
            gt = densify(np.ones((64, 64), dtype=np.uint8))
            save_ground_truth(gt, tmp_path / f"{i}")
            frames.append(datastore.ManifestRecord(
                image=f"{i}.png", gt=f"{i}_gt.png", valid=f"{i}_valid.png",
                kind="dense", split="val", frame_id=str(i)))
        datastore.write_manifest(frames, tmp_path / "dataset.jsonl")
        net = micronet.MicroNet(seed=0)
        for conv in net.convs:
            conv.weight[:] = 0.0
            conv.bias[:] = 0.0
        net.convs[-1].bias[:] = 10.0
        assert evaluate(net, tmp_path / "dataset.jsonl") == 1.0

    def test_invariant_to_record_order(self, small_dataset):
        records = datastore.load_manifest(small_dataset)
        net = micronet.MicroNet(seed=1)
        a = evaluate(net, records)
        b = evaluate(net, list(reversed(records)))
        assert abs(a - b) < 1e-12

    def test_empty_val_rejected(self):
        with pytest.raises(ValueError, match="validation"):
            evaluate(micronet.MicroNet(seed=0), [])

    def test_accepts_checkpoint_path(self, small_dataset, tmp_path):
        net = micronet.MicroNet(seed=2)
        micronet.save_checkpoint(net, tmp_path / "m.ckpt")
        a = evaluate(net, small_dataset)
        b = evaluate(tmp_path / "m.ckpt", small_dataset)
        assert abs(a - b) < 1e-7  # float32 round trip


class TestExperimentReport:
    def test_iou_bounds_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            ExperimentReport(conditions=(("x", 1.2),))


class TestRunConditions:
    def test_three_rows_with_expected_names(self, small_dataset, tmp_path):
        cfg = micronet.TrainConfig(epochs=2, seed=5)
        report = run_conditions(small_dataset, cfg, tmp_path, parallel=False)
        names = [name for name, _ in report.conditions]
        assert names == [COND_DENSE, COND_SPARSE, COND_MIX]
        csv_text = (tmp_path / "conditions.csv").read_text().splitlines()
        assert csv_text[0] == "condition,iou"
        assert len(csv_text) == 4

    def test_identical_masks_make_dense_and_sparse_coincide(self, tmp_path):
        # Degenerate dataset where the sparse variant points at the dense
        # mask files: ratio-1 and ratio-0 training see identical bytes, so
        # their models and scores must match exactly. (The mix condition
        # duplicates frames by design and is intentionally not compared.)
        manifest = synthworld.generate_dataset(
            n_scenes=6, variation=synthworld.VariationConfig(),
            cam=synthworld.default_intrinsics(64), lidar=synthworld.LidarSpec(),
            out_dir=tmp_path / "ds", seed=2, val_fraction=0.34,
        )
        records = datastore.load_manifest(manifest)
        degenerate = []
        for r in records:
            if r.kind == datastore.KIND_SPARSE:
                dense = next(d for d in records
                             if d.frame_id == r.frame_id and d.kind == datastore.KIND_DENSE)
                degenerate.append(datastore.ManifestRecord(
                    image=r.image, gt=dense.gt, valid=dense.valid,
                    kind=r.kind, split=r.split, frame_id=r.frame_id))
            else:
                degenerate.append(r)
        cfg = micronet.TrainConfig(epochs=2, seed=3)
        report = run_conditions(degenerate, cfg, tmp_path / "out", parallel=False)
        scores = dict(report.conditions)
        assert abs(scores[COND_DENSE] - scores[COND_SPARSE]) < 1e-9

    def test_reproducible_byte_for_byte(self, small_dataset, tmp_path):
        cfg = micronet.TrainConfig(epochs=2, seed=6)
        run_conditions(small_dataset, cfg, tmp_path / "r1", parallel=False)
        run_conditions(small_dataset, cfg, tmp_path / "r2", parallel=False)
        names = sorted(p.name for p in (tmp_path / "r1").iterdir())
        assert "conditions.csv" in names
        assert sum(n.endswith(".ckpt") for n in names) == 3
        for name in names:
            assert (tmp_path / "r1" / name).read_bytes() == \
                (tmp_path / "r2" / name).read_bytes(), name


class TestRunRatioSweep:
    def test_csv_rows_and_endpoints(self, small_dataset, tmp_path):
        cfg = micronet.TrainConfig(epochs=2, seed=5)
        report = run_ratio_sweep(small_dataset, [0.0, 0.5, 1.0], cfg, tmp_path,
                                 parallel=False)
        assert [r for r, _ in report.sweep] == [0.0, 0.5, 1.0]
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "ratio_dense,iou"
        assert len(lines) == 4

    def test_ratio_one_equals_dense_condition(self, small_dataset, tmp_path):
        cfg = micronet.TrainConfig(epochs=2, seed=5)
        cond = run_conditions(small_dataset, cfg, tmp_path / "c", parallel=False)
        sweep = run_ratio_sweep(small_dataset, [0.0, 1.0], cfg, tmp_path / "s",
                                parallel=False)
        scores = dict(cond.conditions)
        by_ratio = dict(sweep.sweep)
        assert abs(by_ratio[1.0] - scores[COND_DENSE]) < 1e-12
        assert abs(by_ratio[0.0] - scores[COND_SPARSE]) < 1e-12

    def test_bad_ratio_rejected(self, small_dataset, tmp_path):
        with pytest.raises(ValueError, match="outside"):
            run_ratio_sweep(small_dataset, [0.5, 1.5], micronet.TrainConfig(epochs=1),
                            tmp_path, parallel=False)


class TestOverlays:
    def test_writes_one_png_per_val_frame(self, small_dataset, tmp_path):
        net = micronet.MicroNet(seed=0)
        written = save_overlays(net, small_dataset, tmp_path / "ov")
        records = datastore.load_manifest(small_dataset)
        n_val = len({r.frame_id for r in records if r.split == "val"})
        assert len(written) == n_val
        assert all(p.exists() for p in written)
