"""Sparse ground-truth construction, noise points, and mask persistence."""

import itertools
import math

import numpy as np
import pytest

from roadseg.geometry import PixelCoord
from roadseg.maskgen import (
    NoiseConfig,
    SparseGroundTruth,
    build_sparse_gt,
    densify,
    hflip,
    load_ground_truth,
    load_mask_png,
    save_ground_truth,
    save_mask_png,
)

NO_NOISE = NoiseConfig(density_ratio=0.0, seed=0)


class TestBuildSparseGt:
    def test_single_road_point(self):
        gt = build_sparse_gt([(PixelCoord(3, 7), 1)], (16, 16), NO_NOISE)
        assert gt.labels[7][3] == 1
        assert gt.valid[7][3] == 1
        assert gt.valid_count == 1
        assert gt.pixel_count == 256

    def test_conflict_rule_exhaustive_two_point_enumeration(self):
        # Oracle: road wins only by strict majority; any tie is non-road.
        # Enumerate every two-point combination on same/different pixels.
        pix_a, pix_b = PixelCoord(2, 2), PixelCoord(5, 2)
        for la, lb, same in itertools.product((0, 1), (0, 1), (False, True)):
            second = pix_a if same else pix_b
            gt = build_sparse_gt([(pix_a, la), (second, lb)], (8, 8), NO_NOISE)
            if same:
                road_votes = la + lb
                expected = 1 if road_votes > 2 - road_votes else 0
                assert gt.labels[2][2] == expected, (la, lb)
                assert gt.valid_count == 1
            else:
                assert gt.labels[2][2] == la
                assert gt.labels[2][5] == lb
                assert gt.valid_count == 2

    def test_tie_breaks_to_non_road(self):
        gt = build_sparse_gt(
            [(PixelCoord(4, 4), 1), (PixelCoord(4, 4), 0)], (8, 8), NO_NOISE
        )
        assert gt.labels[4][4] == 0
        assert gt.valid[4][4] == 1

    def test_noise_count_by_counting_oracle(self):
        # 100 projected points in the lower half plus density 0.5 noise
        # should land exactly 150 valid pixels when nothing collides.
        rng = np.random.default_rng(0)
        pix = rng.choice(64 * 32, size=100, replace=False)
        projected = [(PixelCoord(int(p % 64), 32 + int(p // 64)), 1) for p in pix]
        gt = build_sparse_gt(projected, (64, 64), NoiseConfig(density_ratio=0.5, seed=3))
        assert gt.valid_count == 150
        assert gt.valid_count == int(gt.valid.sum())
        # noise stays strictly above floor(0.5 * 64) = row 32
        noise_rows = np.argwhere(gt.valid[:, :] == 1)
        upper = noise_rows[noise_rows[:, 0] < 32]
        assert len(upper) == 50
        assert np.all(gt.labels[gt.valid == 0] == 0)

    def test_noise_never_overwrites_projected_pixels(self):
        projected = [(PixelCoord(u, 0), 1) for u in range(10)]
        gt = build_sparse_gt(projected, (4, 16), NoiseConfig(density_ratio=2.0, seed=1))
        for u in range(10):
            assert gt.labels[0][u] == 1  # still road, not flipped by noise

    def test_noise_clamps_to_available_pixels(self):
        # upper region has 2 rows x 4 cols = 8 pixels; request far more
        projected = [(PixelCoord(0, 3), 1)] * 40
        gt = build_sparse_gt(projected, (4, 4), NoiseConfig(density_ratio=1.0, seed=2))
        assert gt.valid_count == 1 + 8

    def test_zero_projected_points(self):
        gt = build_sparse_gt([], (8, 8), NoiseConfig(density_ratio=1.0, seed=0))
        assert gt.valid_count == 0

    def test_bit_reproducible(self):
        projected = [(PixelCoord(1, 6), 1), (PixelCoord(2, 7), 0)]
        cfg = NoiseConfig(density_ratio=3.0, seed=11)
        a = build_sparse_gt(projected, (8, 8), cfg)
        b = build_sparse_gt(projected, (8, 8), cfg)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            build_sparse_gt([(PixelCoord(9, 0), 1)], (8, 8), NO_NOISE)

    def test_region_fraction_row_bound(self):
        # floor(0.25 * 10) = 2: noise must stay in rows 0..1
        gt = build_sparse_gt(
            [(PixelCoord(0, 9), 0)], (10, 10),
            NoiseConfig(density_ratio=40.0, region_fraction=0.25, seed=5),
        )
        rows = np.argwhere(gt.valid == 1)[:, 0]
        noise_rows = rows[rows != 9]
        assert noise_rows.max() <= 1
        assert len(noise_rows) == 20  # both upper rows filled


class TestDensify:
    def test_all_zero_plane(self):
        gt = densify(np.zeros((4, 4), dtype=np.uint8))
        assert gt.valid_count == 16
        assert gt.labels.sum() == 0

    def test_all_one_plane(self):
        gt = densify(np.ones((4, 4), dtype=np.uint8))
        assert gt.labels.sum() == 16
        assert gt.valid.sum() == 16

    def test_checkerboard(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        gt = densify(board.astype(np.uint8))
        assert int(gt.labels.sum()) == 8
        assert gt.valid_count == 16
        assert gt.is_dense()


class TestHflip:
    def test_involution_bitwise(self):
        rng = np.random.default_rng(8)
        valid = (rng.random((6, 9)) < 0.5).astype(np.uint8)
        labels = ((rng.random((6, 9)) < 0.5) & (valid == 1)).astype(np.uint8)
        gt = SparseGroundTruth.from_planes(labels, valid)
        twice = hflip(hflip(gt))
        np.testing.assert_array_equal(twice.labels, gt.labels)
        np.testing.assert_array_equal(twice.valid, gt.valid)

    def test_single_pixel_moves_to_mirror_column(self):
        gt = build_sparse_gt([(PixelCoord(2, 5), 1)], (8, 8), NO_NOISE)
        flipped = hflip(gt)
        assert flipped.labels[5][8 - 1 - 2] == 1
        assert flipped.valid_count == 1

    def test_dense_stays_dense(self):
        gt = densify((np.arange(16).reshape(4, 4) % 3 == 0).astype(np.uint8))
        flipped = hflip(gt)
        assert flipped.is_dense()
        np.testing.assert_array_equal(flipped.labels, gt.labels[:, ::-1])


class TestInvariants:
    def test_label_outside_valid_rejected(self):
        labels = np.zeros((3, 3), dtype=np.uint8)
        valid = np.zeros((3, 3), dtype=np.uint8)
        labels[1, 1] = 1
        with pytest.raises(ValueError, match="outside the valid plane"):
            SparseGroundTruth.from_planes(labels, valid)

    def test_valid_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="valid_count"):
            SparseGroundTruth(
                labels=np.zeros((2, 2), dtype=np.uint8),
                valid=np.ones((2, 2), dtype=np.uint8),
                valid_count=3,
                pixel_count=4,
            )

    def test_planes_are_immutable(self):
        gt = densify(np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            gt.labels[0, 0] = 1


class TestPngPersistence:
    def test_round_trip(self, tmp_path):
        gt = build_sparse_gt(
            [(PixelCoord(1, 3), 1), (PixelCoord(2, 2), 0)], (6, 6),
            NoiseConfig(density_ratio=1.0, seed=4),
        )
        gt_path, valid_path = save_ground_truth(gt, tmp_path / "frame0")
        assert gt_path.name == "frame0_gt.png"
        assert valid_path.name == "frame0_valid.png"
        loaded = load_ground_truth(gt_path, valid_path)
        np.testing.assert_array_equal(loaded.labels, gt.labels)
        np.testing.assert_array_equal(loaded.valid, gt.valid)
        assert loaded.valid_count == gt.valid_count

    def test_dense_valid_plane_saved_as_full_255(self, tmp_path):
        gt = densify(np.zeros((4, 4), dtype=np.uint8))
        _, valid_path = save_ground_truth(gt, tmp_path / "d")
        from PIL import Image

        raw = np.asarray(Image.open(valid_path))
        assert raw.dtype == np.uint8
        assert np.all(raw == 255)

    def test_mask_png_values(self, tmp_path):
        plane = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        save_mask_png(plane, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), plane)
