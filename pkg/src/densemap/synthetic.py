"""Analytic scenes and synthetic submap bundles with exact ground truth.

Random numbers come from numpy's PCG64 generator. ``SeedSequence(seed)`` is
spawned into one stream for bundle-level draws (true scales) and one stream
per keyframe, so keyframes can be generated independently and in any order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (DepthMap, PinholeCamera, SE3Pose, depth_lookup_many, project_many,
                       unproject_many)
from .submap import Keyframe, MapPoint, Submap, save_submap, write_depth, write_trajectory_file


@dataclass(frozen=True)
class AnalyticScene:
    """Plane, sphere interior or open tube (cylinder interior).

    Signed distance is negative inside material: behind the plane, outside
    the sphere, beyond the tube wall.
    """

    kind: str
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    length: float = 5.0

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "tube"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.kind != "plane" and not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.kind == "tube" and not self.length > 0:
            raise ValueError("tube length must be positive")
        a = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "axis", tuple((a / np.linalg.norm(a)).tolist()))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def plane(cls, point=(0.0, 0.0, 1.0), normal=(0.0, 0.0, -1.0)):
        """Plane through ``point``; ``normal`` points into free space."""
        return cls("plane", radius=0.0, center=point, axis=normal)

    @classmethod
    def sphere(cls, radius=1.0, center=(0.0, 0.0, 0.0)):
        return cls("sphere", radius=radius, center=center)

    @classmethod
    def tube(cls, radius=1.0, length=5.0, origin=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0)):
        """Open cylinder from ``origin`` along ``axis`` for ``length``."""
        return cls("tube", radius=radius, center=origin, axis=axis, length=length)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": self.radius, "center": list(self.center),
                "axis": list(self.axis), "length": self.length}

    @classmethod
    def from_dict(cls, d) -> "AnalyticScene":
        return cls(d["kind"], d.get("radius", 1.0), tuple(d.get("center", (0, 0, 0))),
                   tuple(d.get("axis", (0, 0, 1))), d.get("length", 5.0))

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.center)
        a = np.asarray(self.axis)
        if self.kind == "plane":
            return (p - c) @ a
        if self.kind == "sphere":
            return self.radius - np.linalg.norm(p - c, axis=1)
        q = p - c
        radial = q - np.outer(q @ a, a)
        return self.radius - np.linalg.norm(radial, axis=1)

    def normal(self, p) -> np.ndarray:
        """Unit surface normal pointing into free space at (near-)surface points."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.center)
        a = np.asarray(self.axis)
        if self.kind == "plane":
            return np.broadcast_to(a, p.shape).copy()
        if self.kind == "sphere":
            q = c - p
        else:
            q = p - c
            q = -(q - np.outer(q @ a, a))
        return q / np.linalg.norm(q, axis=1, keepdims=True)

    def intersect(self, origins, dirs) -> np.ndarray:
        """Ray parameter of the nearest positive hit, NaN on a miss."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        c = np.asarray(self.center)
        a = np.asarray(self.axis)
        if self.kind == "plane":
            den = d @ a
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((c - o) @ a) / den
            return np.where((den != 0) & (t > 0), t, np.nan)
        if self.kind == "sphere":
            oc = o - c
            A = np.einsum("ij,ij->i", d, d)
            B = 2 * np.einsum("ij,ij->i", d, oc)
            C = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
            return _nearest_positive_root(A, B, C)
        oc = o - c
        dp = d - np.outer(d @ a, a)
        op = oc - np.outer(oc @ a, a)
        A = np.einsum("ij,ij->i", dp, dp)
        B = 2 * np.einsum("ij,ij->i", dp, op)
        C = np.einsum("ij,ij->i", op, op) - self.radius ** 2
        t = _nearest_positive_root(A, B, C, extent=(oc @ a, d @ a, self.length))
        return t


def _nearest_positive_root(A, B, C, extent=None):
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = B * B - 4 * A * C
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        # numerically stable pair of roots
        q = -0.5 * (B + np.copysign(sq, B))
        r1 = q / A
        r2 = C / q
    lo = np.fmin(r1, r2)
    hi = np.fmax(r1, r2)
    out = np.full(len(A), np.nan)
    for r in (hi, lo):  # lo assigned last so it wins when both are valid
        ok = np.isfinite(r) & (r > 0)
        if extent is not None:
            s0, ds, length = extent
            s = s0 + r * ds
            ok &= (s >= 0) & (s <= length)
        out = np.where(ok, r, out)
    return out


def render_depth(scene: AnalyticScene, pose: SE3Pose, cam: PinholeCamera) -> DepthMap:
    """Ray-cast z-depth per pixel centre; misses are invalid."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    rays_c = np.stack([(u.ravel() - cam.cx) / cam.fx, (v.ravel() - cam.cy) / cam.fy,
                       np.ones(u.size)], axis=1)
    # with z = 1 in the camera frame the ray parameter equals the depth
    dirs_w = rays_c @ pose.R
    origin = pose.inverse().translation
    t = scene.intersect(origin[None, :], dirs_w)
    depth = t.reshape(cam.height, cam.width)
    return DepthMap(np.where(np.isfinite(depth), depth, 0.0), np.isfinite(depth))


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

DEFAULT_CAMERA = PinholeCamera(64.0, 64.0, 63.5, 63.5, 128, 128)


@dataclass
class SyntheticBundle:
    submap: Submap
    true_scales: np.ndarray
    outlier_ids: np.ndarray
    gt_depths: list
    stored_depths: list
    scene: AnalyticScene
    seed: int
    inlier_noise_sigma: float = 0.0
    directory: Optional[Path] = None
    gt_poses: list = field(default_factory=list)

    def sidecar(self) -> dict:
        return {"seed": self.seed, "scene": self.scene.to_dict(),
                "true_scales": {str(kf.id): float(s) for kf, s in zip(self.submap.keyframes, self.true_scales)},
                "outlier_ids": [int(i) for i in self.outlier_ids],
                "inlier_noise_sigma": self.inlier_noise_sigma,
                "rng": "numpy PCG64, SeedSequence(seed).spawn(1 + n_keyframes)"}


def _look_rotation(forward, up_hint) -> np.ndarray:
    """Rows: camera x, y, z axes in world coordinates (world -> camera rotation)."""
    z = forward / np.linalg.norm(forward)
    x = np.cross(up_hint, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def camera_poses(scene: AnalyticScene, n: int, rng: np.random.Generator) -> list:
    """World->camera poses spread over the scene's viewable region."""
    c = np.asarray(scene.center)
    a = np.asarray(scene.axis)
    up = np.array([0.0, 1.0, 0.0]) if abs(a[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    poses = []
    for k in range(n):
        if scene.kind == "tube":
            s = scene.length * (0.1 + 0.4 * (k / max(n - 1, 1)))
            off = rng.normal(0, 0.05 * scene.radius, 3)
            off -= (off @ a) * a
            pos = c + s * a + off
            fwd = a + rng.normal(0, 0.05, 3)
        elif scene.kind == "sphere":
            pos = c + rng.normal(0, 0.05 * scene.radius, 3)
            fwd = _fibonacci_dirs(n)[k]
        else:
            pos = c + a * (1.0 + 0.1 * rng.standard_normal()) + rng.normal(0, 0.05, 3)
            fwd = -a + rng.normal(0, 0.05, 3)
        R = _look_rotation(fwd, up if scene.kind != "sphere" else _up_for(fwd))
        poses.append(SE3Pose.from_matrix(R, -R @ pos))
    return poses


def _up_for(fwd):
    return np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])


def _fibonacci_dirs(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _visible(pose, cam, depth: DepthMap, pw):
    pc = pose.apply(pw)
    uv, ok = project_many(cam, pc)
    _, dok = depth_lookup_many(depth, uv)
    return ok & dok


def _keyframe_points(scene, pose, cam, gt, stored, n_points, n_out, sigma, rng):
    """(positions (n, 3), is_outlier (n,)) for one keyframe."""
    inner = stored.valid.copy()
    # pixels whose bilinear neighbourhood is fully valid
    inner[:-1, :] &= stored.valid[1:, :]
    inner[:, :-1] &= stored.valid[:, 1:]
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    vv, uu = np.nonzero(inner)
    if len(uu) < n_points:
        raise ValueError(f"only {len(uu)} usable pixels for {n_points} points")
    inv = pose.inverse()
    out = np.empty((n_points, 3))
    is_out = np.zeros(n_points, dtype=bool)
    is_out[rng.choice(n_points, size=n_out, replace=False)] = True
    taken = set()
    for i in range(n_points):
        for _attempt in range(1000):
            j = int(rng.integers(len(uu)))
            if j in taken:
                continue
            uv = np.array([[uu[j], vv[j]]], dtype=np.float64)
            base = inv.apply(unproject_many(cam, uv, gt.values[vv[j], uu[j]]))[0]
            if is_out[i]:
                mag = rng.uniform(20 * sigma, 100 * sigma) * (1 if rng.random() < 0.5 else -1)
                p = base + mag * scene.normal(base)[0]
            else:
                p = base + (rng.normal(0, sigma, 3) if sigma > 0 else 0.0)
            if _visible(pose, cam, stored, p[None])[0]:
                taken.add(j)
                out[i] = p
                break
        else:
            raise RuntimeError("could not place a visible map point; scene/camera too restrictive")
    return out, is_out


def make_bundle(scene: AnalyticScene, n_keyframes: int = 10, n_points: int = 300,
                inlier_noise_sigma: float = 0.0, outlier_fraction: float = 0.0,
                scale_range=(0.5, 2.0), seed: int = 0, out_dir=None,
                camera: PinholeCamera = DEFAULT_CAMERA, depth_format: str = "raw") -> SyntheticBundle:
    """Generate a submap whose keyframe depth files are metric depth / true scale.

    Each keyframe contributes ``n_points`` map points sampled on the visible
    surface (observed by that keyframe), with isotropic Gaussian noise. A
    fraction ``outlier_fraction`` of them is instead pushed off the surface
    along its normal by a uniform 20-100 sigma. When ``out_dir`` is given the
    manifest, depth files, trajectories and a ``ground_truth.json`` sidecar are
    written there.
    """
    if not 0 <= outlier_fraction <= 0.6:
        raise ValueError(f"outlier_fraction must be in [0, 0.6], got {outlier_fraction}")
    lo, hi = (float(v) for v in scale_range)
    if not (0 < lo <= hi and np.isfinite(hi)):
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {scale_range}")
    if inlier_noise_sigma < 0:
        raise ValueError("inlier_noise_sigma must be >= 0")
    if outlier_fraction > 0 and inlier_noise_sigma == 0:
        raise ValueError("outliers are sized relative to inlier_noise_sigma, which must be > 0")
    if n_keyframes < 1 or n_points < 1:
        raise ValueError("n_keyframes and n_points must be >= 1")
    if depth_format not in ("raw", "png"):
        raise ValueError("depth_format must be 'raw' or 'png'")

    streams = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(1 + n_keyframes)]
    scales = streams[0].uniform(lo, hi, n_keyframes)
    poses = camera_poses(scene, n_keyframes, streams[0])
    n_out = int(round(outlier_fraction * n_points))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "depth").mkdir(parents=True, exist_ok=True)
        (out_dir / "gt_depth").mkdir(parents=True, exist_ok=True)

    points, keyframes, gt_depths, stored_depths, outliers = {}, [], [], [], []
    next_id = 0
    for k in range(n_keyframes):
        rng = streams[1 + k]
        metric = render_depth(scene, poses[k], camera)
        stored_vals = (metric.values / scales[k]).astype(np.float32).astype(np.float64)
        if depth_format == "png":
            stored_vals = np.rint(stored_vals * 1000.0) / 1000.0
        stored = DepthMap(stored_vals, metric.valid)
        gt = DepthMap(stored.values * scales[k], stored.valid)
        pos, is_out = _keyframe_points(scene, poses[k], camera, gt, stored, n_points, n_out,
                                       inlier_noise_sigma, rng)
        ids = list(range(next_id, next_id + n_points))
        next_id += n_points
        for pid, p in zip(ids, pos):
            points[pid] = MapPoint(pid, p)
        outliers.extend(pid for pid, o in zip(ids, is_out) if o)
        name = f"{k:06d}.{depth_format}"
        depth_path = (out_dir / "depth" / name) if out_dir is not None else Path("depth") / name
        if out_dir is not None:
            write_depth(depth_path, stored, scale=1000.0)
            write_depth(out_dir / "gt_depth" / f"{k:06d}.raw", gt)
        keyframes.append(Keyframe(k, poses[k], camera, depth_path.resolve() if out_dir else depth_path,
                                  None, tuple(ids), 1000.0 if depth_format == "png" else 1.0))
        gt_depths.append(gt)
        stored_depths.append(stored)

    submap = Submap(0, points, tuple(keyframes))
    bundle = SyntheticBundle(submap, scales, np.array(sorted(outliers), dtype=np.int64), gt_depths,
                             stored_depths, scene, seed, inlier_noise_sigma, out_dir, poses)
    if out_dir is not None:
        write_bundle_files(bundle, out_dir)
    return bundle


def write_bundle_files(bundle: SyntheticBundle, out_dir) -> None:
    out_dir = Path(out_dir)
    save_submap(bundle.submap, out_dir / "submap.json")
    traj = [(kf.id, kf.pose_cam_to_world) for kf in bundle.submap.keyframes]
    write_trajectory_file(out_dir / "trajectory.txt", traj)
    write_trajectory_file(out_dir / "gt_trajectory.txt", traj)
    side = bundle.sidecar()
    side["gt_depth_dir"] = "gt_depth"
    side["camera"] = bundle.submap.keyframes[0].camera.to_dict()
    (out_dir / "ground_truth.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
