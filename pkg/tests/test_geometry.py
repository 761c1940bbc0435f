"""Transforms, projection, and the calibration loader."""

import json
import math

import numpy as np
import pytest

from roadseg.geometry import (
    CameraIntrinsics,
    LabeledPointCloud,
    PixelCoord,
    Point3,
    RigidTransform,
    Z_MIN,
    camera_pose,
    compose,
    inverse,
    lidar_pose,
    load_calibration,
    pixel_coords_continuous,
    project_cloud,
    project_point,
    round_half_away,
    save_calibration,
)


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_transform(rng, source="a", target="b"):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return RigidTransform(q, rng.standard_normal(3), source, target)


CAM = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)
IDENT_LC = RigidTransform(np.eye(3), np.zeros(3), "lidar", "camera")


class TestRoundHalfAway:
    def test_halves_go_away_from_zero(self):
        assert round_half_away(0.5) == 1.0
        assert round_half_away(-0.5) == -1.0
        assert round_half_away(2.5) == 3.0
        assert round_half_away(-2.5) == -3.0

    def test_plain_values(self):
        np.testing.assert_array_equal(round_half_away([0.4, -0.4, 1.6, 0.0]), [0.0, -0.0, 2.0, 0.0])


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(ValueError, match="orthonormal"):
            RigidTransform(bad, np.zeros(3), "a", "b")

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="determinant"):
            RigidTransform(refl, np.zeros(3), "a", "b")

    def test_compose_identity(self):
        rng = np.random.default_rng(0)
        t = random_transform(rng, "lidar", "camera")
        out = compose(t, RigidTransform.identity("lidar"))
        np.testing.assert_allclose(out.rotation, t.rotation, atol=1e-12)
        np.testing.assert_allclose(out.translation, t.translation, atol=1e-12)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        t = random_transform(rng, "lidar", "camera")
        ident = compose(t, inverse(t))
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-9)
        assert ident.source_frame == "camera" and ident.target_frame == "camera"

    def test_compose_hand_case(self):
        # Rz(90) with translation (1,0,0), composed with a pure Rz(90):
        # result is Rz(180) with translation unchanged (hand multiplication).
        a = RigidTransform(rot_z(math.pi / 2), [1.0, 0.0, 0.0], "mid", "out")
        b = RigidTransform(rot_z(math.pi / 2), [0.0, 0.0, 0.0], "in", "mid")
        out = compose(a, b)
        np.testing.assert_allclose(out.rotation, rot_z(math.pi), atol=1e-12)
        np.testing.assert_allclose(out.translation, [1.0, 0.0, 0.0], atol=1e-12)
        assert out.source_frame == "in" and out.target_frame == "out"

    def test_compose_frame_mismatch_names_both_frames(self):
        a = RigidTransform.identity("camera")
        b = RigidTransform.identity("lidar")
        with pytest.raises(ValueError) as err:
            compose(a, b)
        assert "camera" in str(err.value) and "lidar" in str(err.value)

    def test_compose_associative(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = random_transform(rng, "c", "d")
            b = random_transform(rng, "b", "c")
            c = random_transform(rng, "a", "b")
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-9)
            np.testing.assert_allclose(left.translation, right.translation, atol=1e-9)


class TestProjectPoint:
    def test_optical_axis_maps_to_principal_point(self):
        assert project_point(Point3(0, 0, 5), CAM, IDENT_LC) == PixelCoord(64, 64)

    def test_off_axis_hand_value(self):
        # u = round(100 * 1/5 + 64) = 84 by direct evaluation of the pinhole map
        assert project_point(Point3(1, 0, 5), CAM, IDENT_LC) == PixelCoord(84, 64)

    def test_behind_camera_is_culled(self):
        assert project_point(Point3(0, 0, -1.0), CAM, IDENT_LC) is None

    def test_near_plane_cull(self):
        assert project_point(Point3(0, 0, Z_MIN), CAM, IDENT_LC) is None
        assert project_point(Point3(0, 0, Z_MIN + 1e-6), CAM, IDENT_LC) is not None

    def test_out_of_bounds_is_culled(self):
        assert project_point(Point3(10.0, 0, 5), CAM, IDENT_LC) is None

    def test_projective_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 20)])
            s = rng.uniform(0.1, 10)
            uv1 = pixel_coords_continuous(p[None], CAM)[0]
            uv2 = pixel_coords_continuous((s * p)[None], CAM)[0]
            np.testing.assert_allclose(uv1, uv2, atol=1e-9)

    def test_deterministic_bitwise(self):
        p = Point3(0.123456, -0.654321, 7.89)
        assert project_point(p, CAM, IDENT_LC) == project_point(p, CAM, IDENT_LC)

    def test_inverse_pinhole_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            u0 = rng.uniform(0, CAM.width - 1)
            v0 = rng.uniform(0, CAM.height - 1)
            d = rng.uniform(0.5, 50)
            p = np.array([(u0 - CAM.cx) / CAM.fx * d, (v0 - CAM.cy) / CAM.fy * d, d])
            uv = pixel_coords_continuous(p[None], CAM)[0]
            np.testing.assert_allclose(uv, [u0, v0], atol=1e-9)


class TestProjectCloud:
    def test_drops_points_behind_camera(self):
        cloud = LabeledPointCloud(
            points=[[0, 0, 5], [0, 0, -5], [1, 0, 5]], labels=[1, 1, 0]
        )
        out = project_cloud(cloud, CAM, IDENT_LC)
        assert len(out) == 2
        assert out[0] == (PixelCoord(64, 64), 1)
        assert out[1] == (PixelCoord(84, 64), 0)

    def test_optical_axis_points_collapse_to_principal_point(self):
        zs = np.arange(2.0, 10.0)
        cloud = LabeledPointCloud(np.stack([np.zeros_like(zs), np.zeros_like(zs), zs], 1),
                                  np.ones(len(zs), dtype=np.uint8))
        out = project_cloud(cloud, CAM, IDENT_LC)
        assert all(pix == PixelCoord(64, 64) for pix, _ in out)

    def test_empty_cloud(self):
        cloud = LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
        assert project_cloud(cloud, CAM, IDENT_LC) == []

    def test_ground_ring_matches_closed_form(self):
        # A level lidar above the ground plane: beam at elevation theta < 0
        # hits the ground on a circle of radius h / tan(-theta). Projecting
        # through a co-located level camera must match trigonometry done
        # from scratch here.
        h_lidar, h_cam = 1.6, 1.4
        cam = CameraIntrinsics(fx=70.0, fy=70.0, cx=31.5, cy=31.5, width=64, height=64)
        t_wl = lidar_pose((0.0, 0.0, h_lidar))
        t_wc = camera_pose((0.0, 0.0, h_cam))
        t_cl = compose(t_wc, inverse(t_wl))
        theta = math.radians(-8.0)
        radius = h_lidar / math.tan(-theta)
        azimuths = np.radians(np.arange(-20.0, 20.0, 2.0))
        pts_lidar = np.stack(
            [radius * np.cos(azimuths), radius * np.sin(azimuths),
             np.full_like(azimuths, -h_lidar)], axis=1
        )
        cloud = LabeledPointCloud(pts_lidar, np.ones(len(pts_lidar), dtype=np.uint8))
        projected = project_cloud(cloud, cam, t_cl)
        assert len(projected) == len(pts_lidar)
        for (pix, _), az in zip(projected, azimuths):
            # independent closed form: world point, then level-camera pinhole
            wx, wy = radius * math.cos(az), radius * math.sin(az)
            u_exp = cam.fx * (-wy) / wx + cam.cx
            v_exp = cam.fy * h_cam / wx + cam.cy
            assert abs(pix.u - u_exp) <= 0.5 + 1e-9
            assert abs(pix.v - v_exp) <= 0.5 + 1e-9


class TestCalibrationFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        t = random_transform(rng, "lidar", "camera")
        path = tmp_path / "calib.json"
        save_calibration(path, CAM, t)
        cam2, t2 = load_calibration(path)
        assert cam2 == CAM
        np.testing.assert_allclose(t2.rotation, t.rotation, atol=1e-12)
        np.testing.assert_allclose(t2.translation, t.translation, atol=1e-12)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text(json.dumps({"K": [1] * 9, "width": 4, "height": 4}))
        with pytest.raises(ValueError, match="T_camera_lidar"):
            load_calibration(path)

    def test_bad_rotation_rejected(self, tmp_path):
        mat = np.eye(4)
        mat[0, 0] = 2.0
        payload = {
            "K": [100, 0, 2, 0, 100, 2, 0, 0, 1],
            "T_camera_lidar": [float(x) for x in mat.reshape(-1)],
            "width": 4,
            "height": 4,
        }
        path = tmp_path / "calib.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="orthonormal"):
            load_calibration(path)

    def test_rejects_invalid_json(self, tmp_path):
        path = tmp_path / "calib.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="JSON"):
            load_calibration(path)


class TestValidation:
    def test_point3_must_be_finite(self):
        with pytest.raises(ValueError):
            Point3(float("nan"), 0, 0)

    def test_intrinsics_bounds(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=4, cy=0, width=4, height=4)

    def test_cloud_length_mismatch(self):
        with pytest.raises(ValueError):
            LabeledPointCloud(np.zeros((3, 3)), np.zeros(2, dtype=np.uint8))
