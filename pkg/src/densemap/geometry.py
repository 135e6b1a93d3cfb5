"""Rigid/similarity transforms, pinhole projection and depth-map sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Z_MIN = 1e-6


def _normalized_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(q)):
        raise ValueError(f"non-finite quaternion {q}")
    n = np.sqrt(q @ q)
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    # Leave already-unit quaternions untouched so save/load round trips are exact.
    if abs(n - 1.0) > 1e-12:
        q = q / n
    return q


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 from a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform x -> R x + t with R stored as a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        q = _normalized_quat(self.rotation)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        R = quat_to_matrix(q)
        R.setflags(write=False)
        object.__setattr__(self, "_R", R)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "SE3Pose":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return self._R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self._R.T + self.translation

    def inverse(self) -> "SE3Pose":
        w, x, y, z = self.rotation
        Rt = self._R.T
        return SE3Pose(np.array([w, -x, -y, -z]), -(Rt @ self.translation))

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self * other, i.e. apply ``other`` first."""
        R = self._R @ other.R
        return SE3Pose.from_matrix(R, self._R @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, SE3Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def se3_apply(pose: SE3Pose, point_world) -> np.ndarray:
    return pose.apply(point_world)


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity x -> s R x + t."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = float(self.scale)
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"Sim3 scale must be positive, got {s}")
        object.__setattr__(self, "scale", s)
        q = _normalized_quat(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_R", quat_to_matrix(q))

    @classmethod
    def from_matrix(cls, scale, R, t) -> "Sim3Transform":
        return cls(scale, matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return self._R

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self._R.T) + self.translation

    def inverse(self) -> "Sim3Transform":
        w, x, y, z = self.rotation
        inv_s = 1.0 / self.scale
        return Sim3Transform(inv_s, np.array([w, -x, -y, -z]), -inv_s * (self._R.T @ self.translation))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation_wxyz": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class DepthMap:
    """Up-to-scale depth image with a validity mask.

    ``values`` is indexed ``[v, u]`` (row, column). Non-finite or non-positive
    entries are always treated as invalid, whatever the supplied mask says.
    """

    def __init__(self, values, valid=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {values.shape}")
        ok = np.isfinite(values) & (values > 0)
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != values.shape:
                raise ValueError("mask shape does not match depth shape")
            ok &= valid
        values = np.where(ok, values, 0.0)
        values.setflags(write=False)
        ok.setflags(write=False)
        self.values = values
        self.valid = ok

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(self.values * factor, self.valid)

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.valid, other.valid)

    def __repr__(self):
        return f"DepthMap({self.width}x{self.height}, {int(self.valid.sum())} valid)"


def project(cam: PinholeCamera, point_cam, z_min: float = Z_MIN) -> Optional[np.ndarray]:
    """Pixel (u, v) of a camera-frame point, or None when out of view."""
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    if not z > z_min:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        return None
    return np.array([u, v])


def project_many(cam: PinholeCamera, points_cam, z_min: float = Z_MIN):
    """Vectorized `project`. Returns (uv (N, 2), in_view (N,))."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    front = z > z_min
    zs = np.where(front, z, 1.0)
    u = cam.fx * p[:, 0] / zs + cam.cx
    v = cam.fy * p[:, 1] / zs + cam.cy
    ok = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return np.stack([u, v], axis=1), ok


def unproject(cam: PinholeCamera, px, depth: float) -> np.ndarray:
    """Camera-frame point on the ray through ``px`` with z equal to ``depth``."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = px
    return np.array([depth * ((u - cam.cx) / cam.fx), depth * ((v - cam.cy) / cam.fy), depth])


def unproject_many(cam: PinholeCamera, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    return np.stack([d * ((uv[:, 0] - cam.cx) / cam.fx), d * ((uv[:, 1] - cam.cy) / cam.fy), d], axis=1)


def depth_lookup(d: DepthMap, px) -> Optional[float]:
    """Bilinear depth at a sub-pixel position; None if outside or touching an invalid pixel."""
    vals, ok = depth_lookup_many(d, np.asarray(px, dtype=np.float64).reshape(1, 2))
    return float(vals[0]) if ok[0] else None


def depth_lookup_many(d: DepthMap, uv):
    """Vectorized bilinear lookup. Returns (depth (N,), valid (N,)); invalid entries are 0."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    h, w = d.values.shape
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = uc - u0
    b = vc - v0
    D, M = d.values, d.valid
    ok = inside & M[v0, u0] & M[v0, u1] & M[v1, u0] & M[v1, u1]
    val = ((1 - a) * (1 - b) * D[v0, u0] + a * (1 - b) * D[v0, u1]
           + (1 - a) * b * D[v1, u0] + a * b * D[v1, u1])
    return np.where(ok, val, 0.0), ok
