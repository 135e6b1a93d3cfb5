"""Trajectory alignment, ATE and reconstruction accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap, PinholeCamera, SE3Pose, Sim3Transform, unproject_many


class EvaluationError(ValueError):
    pass


class Trajectory:
    """Camera-to-world poses keyed by strictly increasing frame id."""

    def __init__(self, entries):
        entries = list(entries)
        ids = [int(i) for i, _ in entries]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("trajectory ids must be strictly increasing")
        self.ids = np.array(ids, dtype=np.int64)
        self.poses = [p for _, p in entries]
        self.positions = (np.stack([p.translation for p in self.poses]) if self.poses
                          else np.zeros((0, 3)))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite trajectory position")

    @classmethod
    def from_positions(cls, ids, positions) -> "Trajectory":
        return cls((int(i), SE3Pose(translation=p)) for i, p in zip(ids, np.asarray(positions, dtype=float)))

    def __len__(self):
        return len(self.ids)

    def matched(self, other: "Trajectory"):
        """Positions of frames present in both, in id order: (ids, self_pos, other_pos)."""
        common, ia, ib = np.intersect1d(self.ids, other.ids, assume_unique=True, return_indices=True)
        return common, self.positions[ia], other.positions[ib]


def umeyama(src, dst, with_scale: bool = True):
    """Least-squares (s, R, t) minimizing sum ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs * xs) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t, D


def umeyama_sim3(est: Trajectory, gt: Trajectory) -> Sim3Transform:
    """Similarity mapping estimated positions onto ground truth (frames matched by id)."""
    ids, pe, pg = est.matched(gt)
    if len(ids) < 3:
        raise EvaluationError(f"need at least 3 frames matched by id, got {len(ids)}")
    xs = pe - pe.mean(0)
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise EvaluationError("degenerate alignment: estimated positions are coincident or collinear")
    s, R, t, _ = umeyama(pe, pg)
    if not s > 0:
        raise EvaluationError("degenerate alignment: ground-truth positions have no spread")
    return Sim3Transform.from_matrix(s, R, t)


def ate_rms(est: Trajectory, gt: Trajectory, s: Optional[Sim3Transform] = None) -> float:
    ids, pe, pg = est.matched(gt)
    if len(ids) == 0:
        raise EvaluationError("no frames matched by id")
    aligned = s.apply(pe) if s is not None else pe
    r = pg - aligned
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


@dataclass
class AccuracyReport:
    rms_acc: float
    meda_acc: float
    n_model_points: int
    distances: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"rms_acc": self.rms_acc, "meda_acc": self.meda_acc, "n_model_points": self.n_model_points}


def upper_median(x) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    return float(x[len(x) // 2])


def nearest_distances(model, gt):
    """(distance, index) of each model point's nearest gt point.

    Distances are recomputed from the returned index as
    ``sqrt(dx*dx + dy*dy + dz*dz)``; exact ties go to the smaller gt index.
    """
    model = np.asarray(model, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(gt)
    k = min(4, len(gt))
    dist, idx = tree.query(model, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    diff = model[:, None, :] - gt[idx]
    d = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2])
    # smallest recomputed distance; among exact ties the smallest gt index
    dmin = d.min(axis=1, keepdims=True)
    cand = np.where(d == dmin, idx, np.iinfo(np.int64).max)
    col = np.argmin(cand, axis=1)
    rows = np.arange(len(model))
    best_d, best_i = d[rows, col], idx[rows, col].astype(np.int64)
    if k < len(gt):
        # more tied (or ulp-close) points than candidates: rescan the ball around the query
        slack = 1e-9 * dmin[:, 0] + 1e-300
        for r in np.nonzero(d[:, -1] <= dmin[:, 0] + slack)[0]:
            near = np.array(sorted(tree.query_ball_point(model[r], best_d[r] + 2 * slack[r])), dtype=np.int64)
            diff = model[r] - gt[near]
            dd = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
            j = int(np.argmin(dd))  # first occurrence: smallest index among ties
            best_d[r], best_i[r] = dd[j], near[j]
    return best_d, best_i


def accuracy(model_points, gt_cloud, keep_distances: bool = False) -> AccuracyReport:
    """One-directional accuracy: model point -> nearest gt point distances."""
    model_points = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(model_points) == 0 or len(gt_cloud) == 0:
        raise EvaluationError("accuracy needs non-empty model and ground-truth point sets")
    d, _ = nearest_distances(model_points, gt_cloud)
    return AccuracyReport(float(np.sqrt(np.mean(d * d))), upper_median(d), len(model_points),
                          d if keep_distances else None)


def unproject_gt_cloud(gt_depths, gt_poses, cam: PinholeCamera, stride: int = 2) -> np.ndarray:
    """World points from every ``stride``-th pixel of each GT depth map.

    ``gt_poses`` holds camera-to-world poses (a `Trajectory` or a list of
    `SE3Pose`) in the same order as ``gt_depths``.
    """
    poses = gt_poses.poses if isinstance(gt_poses, Trajectory) else list(gt_poses)
    if len(poses) != len(gt_depths):
        raise EvaluationError(f"{len(gt_depths)} depth maps but {len(poses)} poses")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for d, pose in zip(gt_depths, poses):
        if (d.width, d.height) != (cam.width, cam.height):
            raise EvaluationError("GT depth size does not match camera")
        sub = d.valid[::stride, ::stride]
        vv, uu = np.nonzero(sub)
        if len(uu) == 0:
            continue
        u, v = uu * stride, vv * stride
        pc = unproject_many(cam, np.stack([u, v], 1).astype(np.float64), d.values[v, u])
        out.append(pose.apply(pc))
    return np.concatenate(out) if out else np.zeros((0, 3))
