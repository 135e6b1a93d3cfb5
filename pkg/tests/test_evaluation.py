import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from densemap.evaluation import (EvaluationError, Trajectory, accuracy, ate_rms, nearest_distances,
                                 umeyama_sim3, unproject_gt_cloud)
from densemap.geometry import DepthMap, PinholeCamera, SE3Pose, Sim3Transform
from densemap.synthetic import AnalyticScene, make_bundle

from conftest import random_pose, random_rotation
from oracles import nearest_bruteforce, rotation_angle


def traj(positions, ids=None):
    ids = range(len(positions)) if ids is None else ids
    return Trajectory.from_positions(ids, positions)


def planted(rng, n=100):
    est = rng.normal(0, 1, (n, 3))
    S = Sim3Transform.from_matrix(rng.uniform(0.2, 5), random_rotation(rng), rng.normal(0, 3, 3))
    return est, S


class TestUmeyama:
    def test_identity(self, rng):
        p = rng.normal(size=(20, 3))
        S = umeyama_sim3(traj(p), traj(p))
        assert abs(S.scale - 1) < 1e-12
        assert np.abs(S.R - np.eye(3)).max() < 1e-12
        assert np.abs(S.translation).max() < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_similarity(self, seed):
        rng = np.random.default_rng(seed)
        est, S = planted(rng)
        got = umeyama_sim3(traj(est), traj(S.apply(est)))
        assert abs(got.scale - S.scale) <= 1e-9
        assert rotation_angle(got.R.T @ S.R) <= 1e-9
        assert np.abs(got.translation - S.translation).max() <= 1e-9

    def test_matches_by_id(self, rng):
        est, S = planted(rng, 10)
        gt = S.apply(est)
        # gt lists a subset of frames plus extra ids the estimate does not have
        e = traj(est, ids=range(0, 20, 2))
        g = Trajectory.from_positions([0, 2, 3, 6, 8, 10, 12, 99], np.vstack([gt[[0, 1]], [[9, 9, 9]], gt[3:7], [[5, 5, 5]]]))
        got = umeyama_sim3(e, g)
        assert abs(got.scale - S.scale) < 1e-9
        assert ate_rms(e, g, got) < 1e-9

    def test_reflection_guard(self):
        # gt is the mirror image of est: the unconstrained orthogonal optimum is a reflection
        est = np.array([[1.0, 0, 0], [0, 2, 0], [0, 0, 3], [1, 1, 0.5]])
        gt = est * [-1, 1, 1]
        S = umeyama_sim3(traj(est), traj(gt))
        assert np.linalg.det(S.R) == pytest.approx(1.0, abs=1e-12)
        # constrained brute force over proper rotations; scale and translation are
        # closed-form for a fixed rotation (projection onto the centred points)
        xs, xd = est - est.mean(0), gt - gt.mean(0)

        def cost_for(Rs):
            rx = np.einsum("rij,nj->rni", Rs, xs)
            sc = np.maximum(np.einsum("rni,ni->r", rx, xd) / np.sum(xs * xs), 1e-12)
            res = xd[None] - sc[:, None, None] * rx
            return np.sqrt(np.mean(np.sum(res * res, axis=2), axis=1))

        Rs = Rotation.random(50000, random_state=0).as_matrix()
        c = cost_for(Rs)
        polished = [minimize(lambda v: cost_for(Rotation.from_rotvec(v).as_matrix()[None])[0],
                             Rotation.from_matrix(Rs[i]).as_rotvec(), method="Nelder-Mead",
                             options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000}).fun
                    for i in np.argsort(c)[:5]]
        assert ate_rms(traj(est), traj(gt), S) <= min(polished) + 1e-9

    @pytest.mark.parametrize("pts, msg", [
        (np.zeros((2, 3)), "at least 3"),
        (np.ones((5, 3)), "coincident or collinear"),
        (np.outer(np.arange(5.0), [1, 2, 3]), "coincident or collinear"),
    ])
    def test_degenerate(self, pts, msg):
        with pytest.raises(EvaluationError, match=msg):
            umeyama_sim3(traj(pts), traj(pts))

    def test_gt_without_spread(self, rng):
        with pytest.raises(EvaluationError, match="spread"):
            umeyama_sim3(traj(rng.normal(size=(5, 3))), traj(np.ones((5, 3))))


class TestAte:
    def test_zero(self, rng):
        p = rng.normal(size=(10, 3))
        assert ate_rms(traj(p), traj(p)) == 0.0

    def test_one_point_offset(self):
        assert ate_rms(traj([[0.0, 0, 0]]), traj([[3.0, 0, 0]])) == 3.0

    def test_direct_formula(self, rng):
        a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        S = Sim3Transform.from_matrix(1.3, random_rotation(rng), [1, 2, 3])
        want = math.sqrt(sum(sum((b[i][k] - S.apply(a[i])[k]) ** 2 for k in range(3)) for i in range(50)) / 50)
        assert abs(ate_rms(traj(a), traj(b), S) - want) <= 1e-12

    def test_optimality(self, rng):
        est, S = planted(rng, 30)
        gt = S.apply(est) + rng.normal(0, 0.05, (30, 3))
        best = umeyama_sim3(traj(est), traj(gt))
        e0 = ate_rms(traj(est), traj(gt), best)
        for _ in range(200):
            dR = Rotation.from_rotvec(rng.normal(0, 1e-3, 3)).as_matrix()
            T = Sim3Transform.from_matrix(best.scale * math.exp(rng.normal(0, 1e-3)), dR @ best.R,
                                          best.translation + rng.normal(0, 1e-3, 3))
            assert ate_rms(traj(est), traj(gt), T) >= e0

    def test_empty_match(self):
        with pytest.raises(EvaluationError):
            ate_rms(traj([[0.0, 0, 0]], ids=[1]), traj([[0.0, 0, 0]], ids=[2]))

    def test_ids_must_increase(self):
        with pytest.raises(ValueError):
            Trajectory.from_positions([2, 1], np.zeros((2, 3)))


class TestAccuracy:
    def test_brute_force_equivalence(self, rng):
        model = rng.uniform(-1, 1, (200, 3))
        gt = rng.uniform(-1, 1, (300, 3))
        d, i = nearest_distances(model, gt)
        bd, bi = nearest_bruteforce(model, gt)
        np.testing.assert_array_equal(d, bd)
        np.testing.assert_array_equal(i, bi)
        rep = accuracy(model, gt, keep_distances=True)
        assert abs(rep.rms_acc - math.sqrt(sum(x * x for x in bd) / 200)) <= 1e-12
        assert abs(rep.meda_acc - sorted(bd)[100]) <= 1e-12
        assert rep.n_model_points == 200

    def test_many_way_ties_pick_smallest_index(self):
        # a query at the centre of a cube of 8 grid points, listed in shuffled order
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
        gt = np.vstack([[[5, 5, 5]], corners[[6, 3, 7, 1, 4, 0, 2, 5]]])
        d, i = nearest_distances([[0.5, 0.5, 0.5]], gt)
        bd, bi = nearest_bruteforce([[0.5, 0.5, 0.5]], gt)
        assert i[0] == bi[0] == 1 and d[0] == bd[0]

    def test_integer_grid_ties(self, rng):
        gt = np.array(np.meshgrid(*[np.arange(6.0)] * 3)).reshape(3, -1).T
        rng.shuffle(gt)
        model = rng.integers(0, 10, (100, 3)) / 2.0
        d, i = nearest_distances(model, gt)
        bd, bi = nearest_bruteforce(model, gt)
        np.testing.assert_array_equal(d, bd)
        np.testing.assert_array_equal(i, bi)

    def test_subset_is_zero(self, rng):
        gt = rng.normal(size=(100, 3))
        rep = accuracy(gt[::3], gt)
        assert rep.rms_acc == rep.meda_acc == 0.0

    def test_shifted_plane(self):
        xy = np.array(np.meshgrid(np.linspace(0, 10, 201), np.linspace(0, 10, 201))).reshape(2, -1).T
        gt = np.c_[xy, np.zeros(len(xy))]
        model = gt[::7] + [0, 0, 1.0]
        rep = accuracy(model, gt)
        assert rep.meda_acc == pytest.approx(1.0, abs=1e-12)

    def test_not_symmetric(self, rng):
        a = rng.normal(size=(50, 3))
        b = np.vstack([a, rng.normal(5, 1, (50, 3))])
        assert accuracy(a, b).rms_acc == 0.0
        assert accuracy(b, a).rms_acc > 1.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            accuracy(np.zeros((0, 3)), np.ones((2, 3)))
        with pytest.raises(EvaluationError):
            accuracy(np.ones((2, 3)), np.zeros((0, 3)))

    def test_single_gt_point(self):
        d, i = nearest_distances([[0.0, 0, 0], [0, 3, 4]], [[0.0, 0, 0]])
        assert d.tolist() == [0.0, 5.0] and i.tolist() == [0, 0]


class TestGtCloud:
    def test_frustum_sheet(self):
        cam = PinholeCamera(10.0, 10.0, 4.5, 3.5, 10, 8)
        pts = unproject_gt_cloud([DepthMap(np.ones((8, 10)))], [SE3Pose.identity()], cam, stride=1)
        assert len(pts) == 80
        np.testing.assert_array_equal(pts[:, 2], 1.0)
        assert pts[:, 0].min() == -0.45 and pts[:, 0].max() == 0.45

    @pytest.mark.parametrize("w, h", [(10, 8), (11, 9), (13, 4)])
    def test_stride_count(self, w, h):
        cam = PinholeCamera(10.0, 10.0, w / 2, h / 2, w, h)
        pts = unproject_gt_cloud([DepthMap(np.full((h, w), 2.0))] * 2, [SE3Pose.identity()] * 2, cam, stride=4)
        assert len(pts) == 2 * math.ceil(w / 4) * math.ceil(h / 4)

    def test_tube_cloud_on_surface(self):
        b = make_bundle(AnalyticScene.tube(), n_keyframes=2, n_points=10, seed=1)
        cam = b.submap.keyframes[0].camera
        poses = Trajectory((kf.id, kf.pose_cam_to_world) for kf in b.submap.keyframes)
        pts = unproject_gt_cloud(b.gt_depths, poses, cam)
        assert np.abs(b.scene.sdf(pts)).max() <= 1e-6

    def test_applies_pose(self, rng):
        cam = PinholeCamera(10.0, 10.0, 4.5, 3.5, 10, 8)
        pose = random_pose(rng)
        d = DepthMap(np.full((8, 10), 1.5))
        base = unproject_gt_cloud([d], [SE3Pose.identity()], cam, stride=1)
        moved = unproject_gt_cloud([d], [pose], cam, stride=1)
        np.testing.assert_allclose(moved, pose.apply(base), atol=1e-12)

    def test_length_mismatch(self):
        cam = PinholeCamera(10.0, 10.0, 4.5, 3.5, 10, 8)
        with pytest.raises(EvaluationError, match="poses"):
            unproject_gt_cloud([DepthMap(np.ones((8, 10)))], [], cam)
