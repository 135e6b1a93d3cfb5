"""Per-keyframe scale alignment of up-to-scale depth to sparse map points.

Pipeline for one keyframe: pair each observed map point with the depth-map
point on the same camera ray, rank every per-point scale proposal by the
median squared residual of the other pairs (LMedS), gate inliers at
``t * 1.4826 * sqrt(min_median)``, then refine the scale over the inliers with
Huber IRLS started from the LMedS scale.

All quantities live in the keyframe's camera frame.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import DepthMap, depth_lookup_many, project_many, unproject_many
from .kernels.lmeds import proposal_medians, row_norms
from .submap import Submap, observed_points

log = logging.getLogger(__name__)

SIGMA_CONSISTENCY = 1.4826


class ScaleEstimationError(RuntimeError):
    pass


class TooFewPairsError(ScaleEstimationError):
    pass


@dataclass(frozen=True)
class PointPair:
    point_id: int
    x_cam: np.ndarray
    x_cam_depth: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.x_cam, dtype=np.float64).reshape(3)
        b = np.asarray(self.x_cam_depth, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError(f"pair {self.point_id}: non-finite coordinates")
        if not b[2] > 0:
            raise ValueError(f"pair {self.point_id}: depth point must have positive z")
        object.__setattr__(self, "x_cam", a)
        object.__setattr__(self, "x_cam_depth", b)


@dataclass
class EstimatorConfig:
    t: float = 2.5
    max_proposals: Optional[int] = None
    min_pairs: int = 10
    irls_max_iter: int = 20
    irls_tol: float = 1e-9
    robust_kernel: str = "huber"
    rng_seed: int = 0
    backend: Optional[str] = None

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.min_pairs < 3:
            raise ValueError(f"min_pairs must be >= 3, got {self.min_pairs}")
        if self.max_proposals is not None and self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1 or None")
        if self.irls_max_iter < 1:
            raise ValueError("irls_max_iter must be >= 1")
        if self.robust_kernel != "huber":
            raise ValueError(f"unsupported robust kernel {self.robust_kernel!r}")

    def to_dict(self) -> dict:
        return {"t": self.t, "max_proposals": self.max_proposals, "min_pairs": self.min_pairs,
                "irls_max_iter": self.irls_max_iter, "irls_tol": self.irls_tol,
                "robust_kernel": self.robust_kernel, "rng_seed": self.rng_seed}


@dataclass
class ScaleEstimate:
    kf_id: int
    s_lmeds: float
    min_median: float
    sigma: float
    inlier_mask: np.ndarray
    s_refined: float
    n_pairs: int
    n_inliers: int
    iterations: int
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    wall_time: float = 0.0

    def to_record(self) -> dict:
        return {"kf_id": int(self.kf_id), "n_pairs": int(self.n_pairs), "n_inliers": int(self.n_inliers),
                "s_lmeds": float(self.s_lmeds), "min_median": float(self.min_median),
                "sigma": float(self.sigma), "s_refined": float(self.s_refined),
                "iterations": int(self.iterations), "wall_time": float(self.wall_time)}


def _pair_arrays(pairs):
    n = len(pairs)
    ids = np.fromiter((p.point_id for p in pairs), dtype=np.int64, count=n)
    X = np.array([p.x_cam for p in pairs], dtype=np.float64).reshape(n, 3)
    Xd = np.array([p.x_cam_depth for p in pairs], dtype=np.float64).reshape(n, 3)
    return ids, X, Xd


def build_point_pairs(m: Submap, kf_id: int, d: DepthMap) -> list:
    """Camera-frame (map point, depth point) pairs for the points keyframe ``kf_id`` observes."""
    kf = m.keyframe(kf_id)
    pts = observed_points(m, kf_id)
    if not pts:
        return []
    ids = np.array([p.id for p in pts], dtype=np.int64)
    Xc = kf.pose_world_to_cam.apply(np.stack([p.position for p in pts]))
    uv, in_view = project_many(kf.camera, Xc)
    depth, ok = depth_lookup_many(d, uv)
    keep = in_view & ok
    if not np.any(keep):
        return []
    Xd = unproject_many(kf.camera, uv[keep], depth[keep])
    return [PointPair(int(i), a, b) for i, a, b in zip(ids[keep], Xc[keep], Xd)]


def scale_proposal(p: PointPair) -> float:
    nd = float(row_norms(p.x_cam_depth.reshape(1, 3))[0])
    if nd == 0.0:
        raise ValueError(f"pair {p.point_id}: zero-norm depth point")
    return float(row_norms(p.x_cam.reshape(1, 3))[0]) / nd


def _proposals(X, Xd):
    nd = row_norms(Xd)
    if np.any(nd == 0):
        raise ValueError("degenerate pair with zero-norm depth point")
    return row_norms(X) / nd


def lmeds_scale(pairs, cfg: EstimatorConfig = None):
    """Return ``(s_lmeds, min_median)``.

    Ties on the median go to the proposal from the smaller point id.
    """
    cfg = cfg or EstimatorConfig()
    if len(pairs) < cfg.min_pairs:
        raise TooFewPairsError(f"{len(pairs)} pairs, need at least {cfg.min_pairs}")
    ids, X, Xd = _pair_arrays(pairs)
    order = np.argsort(ids, kind="stable")
    ids, X, Xd = ids[order], X[order], Xd[order]
    scales = _proposals(X, Xd)
    n = len(ids)
    if cfg.max_proposals is not None and n > cfg.max_proposals:
        rng = np.random.default_rng(cfg.rng_seed)
        prop = np.sort(rng.choice(n, size=cfg.max_proposals, replace=False))
    else:
        prop = np.arange(n)
    med = proposal_medians(X, Xd, scales, prop, backend=cfg.backend)
    # prop is ascending and ids are sorted, so argmin's first hit is the smallest id
    best = int(np.argmin(med))
    return float(scales[prop[best]]), float(med[best])


def classify_inliers(pairs, s_lmeds: float, min_median: float, cfg: EstimatorConfig = None):
    """Return ``(sigma, inlier_mask)``; pair k is an inlier iff its residual <= t * sigma."""
    cfg = cfg or EstimatorConfig()
    if not min_median >= 0:
        raise ValueError(f"min_median must be non-negative, got {min_median}")
    sigma = SIGMA_CONSISTENCY * np.sqrt(min_median)
    _, X, Xd = _pair_arrays(pairs)
    eps = row_norms(X - s_lmeds * Xd)
    return float(sigma), eps <= cfg.t * sigma


def huber_objective(pairs, inlier_mask, s: float, delta: float) -> float:
    """Sum over inliers of the Huber loss of ||X - s Xd|| (quadratic for delta <= 0)."""
    _, X, Xd = _pair_arrays(pairs)
    m = np.asarray(inlier_mask, dtype=bool)
    return _huber(X[m], Xd[m], s, delta)


def _huber(X, Xd, s, delta):
    eps = row_norms(X - s * Xd)
    if delta <= 0:
        return float(0.5 * np.sum(eps * eps))
    quad = eps <= delta
    return float(np.sum(np.where(quad, 0.5 * eps * eps, delta * (eps - 0.5 * delta))))


def refine_scale(pairs, inlier_mask, s_init: float, cfg: EstimatorConfig = None, sigma: float = 0.0,
                 trace: Optional[list] = None):
    """Huber IRLS on the inlier pairs. Returns ``(s_refined, iterations)``.

    Each iteration solves ``s = sum w <X, Xd> / sum w |Xd|^2`` with
    ``w = min(1, delta / eps)`` and ``delta = t * sigma``; ``sigma == 0`` gives
    plain least squares. If ``trace`` is a list, every iterate is appended.
    """
    cfg = cfg or EstimatorConfig()
    m = np.asarray(inlier_mask, dtype=bool)
    if len(m) != len(pairs):
        raise ValueError("inlier_mask length does not match pairs")
    if not np.any(m):
        raise ScaleEstimationError("no inliers to refine the scale on")
    _, X, Xd = _pair_arrays(pairs)
    X, Xd = X[m], Xd[m]
    delta = cfg.t * sigma
    dots = np.einsum("ij,ij->i", X, Xd)
    dd = np.einsum("ij,ij->i", Xd, Xd)
    s = float(s_init)
    if trace is not None:
        trace.append(s)
    it = 0
    for it in range(1, cfg.irls_max_iter + 1):
        if delta > 0:
            eps = row_norms(X - s * Xd)
            w = np.where(eps <= delta, 1.0, delta / np.maximum(eps, np.finfo(float).tiny))
        else:
            w = np.ones(len(X))
        s_new = float(np.sum(w * dots) / np.sum(w * dd))
        if not np.isfinite(s_new):
            raise ScaleEstimationError("non-finite scale during refinement (corrupt input?)")
        if s_new <= 0:
            raise ScaleEstimationError(f"refinement produced non-positive scale {s_new}")
        rel = abs(s_new - s) / abs(s) if s != 0 else np.inf
        s = s_new
        if trace is not None:
            trace.append(s)
        if rel < cfg.irls_tol:
            break
    return s, it


def estimate_from_pairs(pairs, cfg: EstimatorConfig = None, kf_id: int = -1) -> ScaleEstimate:
    cfg = cfg or EstimatorConfig()
    t0 = time.perf_counter()
    s_lmeds, min_median = lmeds_scale(pairs, cfg)
    sigma, mask = classify_inliers(pairs, s_lmeds, min_median, cfg)
    s_ref, iters = refine_scale(pairs, mask, s_lmeds, cfg, sigma=sigma)
    return ScaleEstimate(
        kf_id=kf_id, s_lmeds=s_lmeds, min_median=min_median, sigma=sigma, inlier_mask=mask,
        s_refined=s_ref, n_pairs=len(pairs), n_inliers=int(np.count_nonzero(mask)), iterations=iters,
        point_ids=np.array([p.point_id for p in pairs], dtype=np.int64),
        wall_time=time.perf_counter() - t0)


def estimate_keyframe_scale(m: Submap, kf_id: int, d: DepthMap, cfg: EstimatorConfig = None) -> ScaleEstimate:
    cfg = cfg or EstimatorConfig()
    t0 = time.perf_counter()
    pairs = build_point_pairs(m, kf_id, d)
    if len(pairs) < cfg.min_pairs:
        raise TooFewPairsError(f"keyframe {kf_id}: {len(pairs)} valid pairs, need at least {cfg.min_pairs}")
    est = estimate_from_pairs(pairs, cfg, kf_id)
    est.wall_time = time.perf_counter() - t0
    log.debug("kf %d: n=%d inliers=%d s_lmeds=%.6g s=%.6g sigma=%.3g", kf_id, est.n_pairs,
              est.n_inliers, est.s_lmeds, est.s_refined, est.sigma)
    return est
