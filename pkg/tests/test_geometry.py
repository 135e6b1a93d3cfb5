import numpy as np
import pytest

from densemap.geometry import (
    DepthMap,
    PinholeCamera,
    SE3Pose,
    Sim3Transform,
    depth_lookup,
    depth_lookup_many,
    matrix_to_quat,
    project,
    project_many,
    quat_to_matrix,
    se3_apply,
    unproject,
)

from conftest import random_pose, random_rotation


class TestSE3:
    def test_identity(self):
        assert np.array_equal(se3_apply(SE3Pose.identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_quarter_turn_about_z(self):
        c = np.cos(np.pi / 4)
        pose = SE3Pose(np.array([c, 0.0, 0.0, c]))
        np.testing.assert_allclose(se3_apply(pose, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_homogeneous_matrix(self, rng):
        for _ in range(20):
            pose = random_pose(rng)
            p = rng.normal(size=3)
            # independent oracle: 4x4 built from an explicit quaternion formula
            w, x, y, z = pose.rotation
            R = np.array([
                [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
            ])
            T = np.eye(4)
            T[:3, :3], T[:3, 3] = R, pose.translation
            np.testing.assert_allclose(se3_apply(pose, p), (T @ np.append(p, 1.0))[:3], atol=1e-12)

    def test_quaternion_normalized(self):
        pose = SE3Pose(np.array([2.0, 0.0, 0.0, 0.0]))
        assert abs(np.linalg.norm(pose.rotation) - 1) < 1e-9

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            SE3Pose(np.zeros(4))

    def test_compose_inverse(self, rng):
        for _ in range(20):
            P = random_pose(rng, 10.0)
            p = rng.normal(0, 10, 3)
            np.testing.assert_allclose(P.compose(P.inverse()).apply(p), p, atol=1e-9)
            np.testing.assert_allclose(P.inverse().apply(P.apply(p)), p, atol=1e-9)

    def test_compose_order(self, rng):
        A, B = random_pose(rng), random_pose(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-12)

    def test_batch_apply(self, rng):
        P = random_pose(rng)
        pts = rng.normal(size=(7, 3))
        np.testing.assert_allclose(P.apply(pts), np.stack([P.apply(p) for p in pts]), atol=1e-15)

    def test_quaternion_matrix_round_trip(self, rng):
        for _ in range(50):
            R = random_rotation(rng)
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)
            assert matrix_to_quat(R)[0] >= 0


class TestSim3:
    def test_inverse(self, rng):
        for _ in range(20):
            S = Sim3Transform.from_matrix(rng.uniform(0.1, 10), random_rotation(rng), rng.normal(size=3))
            x = rng.normal(size=(5, 3))
            np.testing.assert_allclose(S.inverse().apply(S.apply(x)), x, atol=1e-9)

    def test_unit_scale_equals_se3(self, rng):
        P = random_pose(rng)
        S = Sim3Transform(1.0, P.rotation, P.translation)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(S.apply(x), P.apply(x), atol=1e-12)

    @pytest.mark.parametrize("s", [0.0, -1.0, np.nan, np.inf])
    def test_bad_scale(self, s):
        with pytest.raises(ValueError):
            Sim3Transform(s)


class TestCamera:
    @pytest.mark.parametrize("kw", [dict(fx=0), dict(fy=-1), dict(cx=0), dict(cy=101), dict(width=0)])
    def test_invalid_intrinsics(self, kw):
        base = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)
        base.update(kw)
        with pytest.raises(ValueError):
            PinholeCamera(**base)

    def test_project_axis(self, cam100):
        np.testing.assert_array_equal(project(cam100, [0.0, 0.0, 1.0]), [50.0, 50.0])

    def test_project_behind(self, cam100):
        assert project(cam100, [0.0, 0.0, -1.0]) is None
        assert project(cam100, [0.0, 0.0, 1e-7]) is None

    def test_project_outside(self, cam100):
        assert project(cam100, [1.0, 0.0, 1.0]) is None  # u = 150
        assert project(cam100, [0.5, 0.0, 1.0]) is not None  # u = 100, last column

    def test_unproject_examples(self, cam100):
        np.testing.assert_array_equal(unproject(cam100, (50.0, 50.0), 2.0), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(unproject(cam100, (150.0, 50.0), 1.0), [1.0, 0.0, 1.0])

    @pytest.mark.parametrize("d", [0.0, -1.0, np.nan])
    def test_unproject_rejects_depth(self, cam100, d):
        with pytest.raises(ValueError):
            unproject(cam100, (1.0, 1.0), d)

    def test_round_trips(self, cam100, rng):
        uv = rng.uniform(0, 100, (200, 2))
        z = rng.uniform(0.1, 50, 200)
        for (u, v), d in zip(uv, z):
            p = unproject(cam100, (u, v), d)
            assert p[2] == d
            px = project(cam100, p)
            np.testing.assert_allclose(px, [u, v], atol=1e-9)
            np.testing.assert_allclose(unproject(cam100, px, p[2]), p, atol=1e-9)

    def test_project_many_agrees(self, cam100, rng):
        pts = rng.normal(0, 1, (300, 3)) + [0, 0, 0.5]
        uv, ok = project_many(cam100, pts)
        for p, q, o in zip(pts, uv, ok):
            single = project(cam100, p)
            assert (single is not None) == o
            if o:
                np.testing.assert_array_equal(single, q)


class TestDepthMap:
    def test_invalid_values_masked(self):
        d = DepthMap(np.array([[1.0, -1.0], [np.nan, 0.0]]))
        assert d.valid.tolist() == [[True, False], [False, False]]
        assert d.values[0, 1] == 0 and d.values[1, 0] == 0

    def test_read_only(self):
        d = DepthMap(np.ones((2, 2)))
        with pytest.raises(ValueError):
            d.values[0, 0] = 3

    def test_lattice_exact(self, rng):
        vals = rng.uniform(1, 5, (6, 7))
        d = DepthMap(vals)
        for v in range(6):
            for u in range(7):
                assert depth_lookup(d, (u, v)) == vals[v, u]

    def test_bilinear_mean(self):
        d = DepthMap(np.array([[1.0, 1.0], [3.0, 3.0]]))
        assert depth_lookup(d, (0.5, 0.5)) == 2.0

    def test_mask_propagation(self):
        vals = np.ones((4, 4))
        valid = np.ones((4, 4), dtype=bool)
        valid[2, 2] = False
        d = DepthMap(vals, valid)
        assert depth_lookup(d, (1.5, 1.5)) is None
        assert depth_lookup(d, (2.0, 2.0)) is None  # the masked pixel itself
        assert depth_lookup(d, (0.5, 0.5)) == 1.0

    def test_outside(self):
        d = DepthMap(np.ones((3, 3)))
        for px in [(-0.1, 1), (1, 2.01), (np.nan, 1)]:
            assert depth_lookup(d, px) is None
        assert depth_lookup(d, (2.0, 2.0)) == 1.0

    def test_bounded_by_neighbours(self, rng):
        vals = rng.uniform(1, 5, (8, 8))
        d = DepthMap(vals)
        uv = rng.uniform(0, 7, (500, 2))
        out, ok = depth_lookup_many(d, uv)
        assert ok.all()
        u0 = np.minimum(np.floor(uv[:, 0]).astype(int), 6)
        v0 = np.minimum(np.floor(uv[:, 1]).astype(int), 6)
        nb = np.stack([vals[v0, u0], vals[v0, u0 + 1], vals[v0 + 1, u0], vals[v0 + 1, u0 + 1]])
        assert np.all(out >= nb.min(0) - 1e-12) and np.all(out <= nb.max(0) + 1e-12)
