"""Submap data model (keyframes, map points, observations) and on-disk formats.

Manifest JSON layout::

    {
      "id": 0,
      "camera": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
      "keyframes": [
        {"id": 0, "pose": [tx, ty, tz, qx, qy, qz, qw],      # world -> camera
         "depth": "depth/000000.raw", "depth_scale": 1000.0,  # depth_scale only for PNG
         "image": null, "observations": [1, 2, 3]}
      ],
      "points": [[id, x, y, z], ...]
    }

Relative paths are resolved against the manifest's directory. A keyframe may
override the shared camera with its own ``"camera"`` entry.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import DepthMap, PinholeCamera, SE3Pose, project_many


class SubmapError(ValueError):
    """Invalid or inconsistent submap input; the message names the file and location."""


@dataclass(frozen=True)
class MapPoint:
    id: int
    position: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(p)):
            raise ValueError(f"map point {self.id} has non-finite coordinates")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)

    def __eq__(self, other):
        if not isinstance(other, MapPoint):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.position, other.position)

    def __hash__(self):
        return hash((self.id, self.position.tobytes()))


@dataclass(frozen=True)
class Keyframe:
    id: int
    pose_world_to_cam: SE3Pose
    camera: PinholeCamera
    depth_path: Path
    image_path: Optional[Path] = None
    observed_point_ids: tuple = ()
    depth_scale: float = 1.0

    def load_depth(self) -> DepthMap:
        d = read_depth(self.depth_path, self.depth_scale)
        if (d.width, d.height) != (self.camera.width, self.camera.height):
            raise SubmapError(
                f"{self.depth_path}: depth is {d.width}x{d.height} but keyframe {self.id} camera is "
                f"{self.camera.width}x{self.camera.height}")
        return d

    def load_image(self) -> Optional[np.ndarray]:
        if self.image_path is None:
            return None
        from PIL import Image

        img = np.asarray(Image.open(self.image_path).convert("RGB"))
        if img.shape[:2] != (self.camera.height, self.camera.width):
            raise SubmapError(f"{self.image_path}: image size {img.shape[1]}x{img.shape[0]} does not "
                              f"match keyframe {self.id} camera")
        return img

    @property
    def pose_cam_to_world(self) -> SE3Pose:
        return self.pose_world_to_cam.inverse()


@dataclass(frozen=True)
class Submap:
    id: int
    points: dict
    keyframes: tuple
    source: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.keyframes:
            raise SubmapError(f"submap {self.id}: needs at least one keyframe")
        seen = set()
        for kf in self.keyframes:
            if kf.id in seen:
                raise SubmapError(f"submap {self.id}: duplicate keyframe id {kf.id}")
            seen.add(kf.id)
            for pid in kf.observed_point_ids:
                if pid not in self.points:
                    raise SubmapError(f"submap {self.id}: keyframe {kf.id} observes undeclared point id {pid}")

    def keyframe(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(f"submap {self.id} has no keyframe {kf_id}")

    @property
    def point_ids(self) -> np.ndarray:
        return np.array(sorted(self.points), dtype=np.int64)

    def point_array(self, ids=None) -> np.ndarray:
        ids = self.point_ids if ids is None else ids
        if len(ids) == 0:
            return np.zeros((0, 3))
        return np.stack([self.points[int(i)].position for i in ids])


def observed_points(m: Submap, kf_id: int) -> list:
    """Map points entering scale estimation for keyframe ``kf_id``.

    The keyframe's observation list in id order; when that list is empty, every
    submap point that projects in-frustum with positive depth.
    """
    kf = m.keyframe(kf_id)
    if kf.observed_point_ids:
        return [m.points[i] for i in sorted(set(kf.observed_point_ids))]
    ids = m.point_ids
    if len(ids) == 0:
        return []
    pc = kf.pose_world_to_cam.apply(m.point_array(ids))
    _, ok = project_many(kf.camera, pc)
    return [m.points[int(i)] for i in ids[ok]]


# ---------------------------------------------------------------------------
# depth files
# ---------------------------------------------------------------------------

RAW_DEPTH_HEADER = struct.Struct("<II")


def read_depth(path, scale: float = 1.0) -> DepthMap:
    """Read a depth map from ``.raw`` (float32) or 16-bit PNG (depth = raw / scale)."""
    path = Path(path)
    if not path.exists():
        raise SubmapError(f"{path}: depth file not found")
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im)
        if raw.ndim != 2:
            raise SubmapError(f"{path}: expected a single-channel 16-bit PNG, got shape {raw.shape}")
        vals = raw.astype(np.float64) / float(scale)
        return DepthMap(vals, raw > 0)
    data = path.read_bytes()
    if len(data) < RAW_DEPTH_HEADER.size:
        raise SubmapError(f"{path}: truncated raw depth header")
    w, h = RAW_DEPTH_HEADER.unpack_from(data)
    if len(data) != RAW_DEPTH_HEADER.size + 4 * w * h:
        raise SubmapError(f"{path}: raw depth payload has {len(data) - 8} bytes, expected {4 * w * h} for {w}x{h}")
    vals = np.frombuffer(data, dtype="<f4", offset=RAW_DEPTH_HEADER.size).reshape(h, w).astype(np.float64)
    return DepthMap(vals)


def write_depth(path, depth: DepthMap, scale: float = 1000.0) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        import io

        raw = np.where(depth.valid, np.rint(depth.values * scale), 0)
        if raw.max(initial=0) > 65535:
            raise ValueError(f"{path}: depth * scale exceeds the 16-bit range")
        buf = io.BytesIO()
        Image.fromarray(raw.astype(np.uint16)).save(buf, format="PNG")
        _atomic_write(path, buf.getvalue())
        return
    vals = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    _atomic_write(path, RAW_DEPTH_HEADER.pack(depth.width, depth.height) + vals.tobytes())


def _atomic_write(path, data: bytes) -> None:
    from .mesh import _atomic_write as aw

    aw(path, data)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _pose_from_list(vals, where) -> SE3Pose:
    if len(vals) != 7:
        raise SubmapError(f"{where}: pose needs 7 numbers (tx ty tz qx qy qz qw), got {len(vals)}")
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in vals)
    try:
        return SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
    except ValueError as exc:
        raise SubmapError(f"{where}: {exc}") from exc


def _pose_to_list(p: SE3Pose) -> list:
    w, x, y, z = p.rotation
    return [float(v) for v in (*p.translation, x, y, z, w)]


def _camera_from_dict(d, where) -> PinholeCamera:
    try:
        return PinholeCamera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]))
    except KeyError as exc:
        raise SubmapError(f"{where}: camera is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise SubmapError(f"{where}: {exc}") from exc


def _line_of(text: str, needle: str) -> int:
    idx = text.find(needle)
    return text.count("\n", 0, idx) + 1 if idx >= 0 else 0


def load_submap(manifest_path, check_dims: bool = True) -> Submap:
    """Parse and validate a submap manifest.

    Depth files must exist; their headers are checked against the camera size
    but pixel data is only read by `Keyframe.load_depth`.
    """
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise SubmapError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SubmapError(f"{manifest_path}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}") from exc
    base = manifest_path.parent

    def where(needle=None):
        line = _line_of(text, needle) if needle else 0
        return f"{manifest_path}:{line}" if line else str(manifest_path)

    for key in ("keyframes", "points"):
        if key not in doc:
            raise SubmapError(f"{manifest_path}: missing top-level field {key!r}")
    shared_cam = _camera_from_dict(doc["camera"], where('"camera"')) if "camera" in doc else None

    points = {}
    for row in doc["points"]:
        if len(row) != 4:
            raise SubmapError(f"{where()}: point entry {row!r} must be [id, x, y, z]")
        pid = int(row[0])
        if pid in points:
            raise SubmapError(f"{where()}: duplicate point id {pid}")
        try:
            points[pid] = MapPoint(pid, np.array(row[1:], dtype=np.float64))
        except ValueError as exc:
            raise SubmapError(f"{where()}: {exc}") from exc

    keyframes = []
    for entry in doc["keyframes"]:
        kid = int(entry["id"])
        loc = where(f'"id": {kid}')
        cam = _camera_from_dict(entry["camera"], loc) if "camera" in entry else shared_cam
        if cam is None:
            raise SubmapError(f"{loc}: keyframe {kid} has no camera and no shared camera is declared")
        if "pose" not in entry or "depth" not in entry:
            raise SubmapError(f"{loc}: keyframe {kid} needs 'pose' and 'depth'")
        pose = _pose_from_list(entry["pose"], loc)
        depth_path = (base / entry["depth"]).resolve()
        if not depth_path.exists():
            raise SubmapError(f"{loc}: keyframe {kid} depth file not found: {depth_path}")
        obs = tuple(int(i) for i in entry.get("observations", []))
        for pid in obs:
            if pid not in points:
                raise SubmapError(f"{where(str(pid))}: keyframe {kid} observes undeclared point id {pid} "
                                  f"(dangling observation)")
        img = entry.get("image")
        image_path = (base / img).resolve() if img else None
        if image_path is not None and not image_path.exists():
            raise SubmapError(f"{loc}: keyframe {kid} image file not found: {image_path}")
        kf = Keyframe(kid, pose, cam, depth_path, image_path, obs, float(entry.get("depth_scale", 1.0)))
        if check_dims:
            _check_depth_dims(kf, loc)
        keyframes.append(kf)

    try:
        return Submap(int(doc.get("id", 0)), points, tuple(keyframes), source=manifest_path)
    except SubmapError as exc:
        raise SubmapError(f"{manifest_path}: {exc}") from exc


def _check_depth_dims(kf: Keyframe, loc: str) -> None:
    p = kf.depth_path
    if p.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(p) as im:
            w, h = im.size
    else:
        with open(p, "rb") as f:
            head = f.read(RAW_DEPTH_HEADER.size)
        if len(head) < RAW_DEPTH_HEADER.size:
            raise SubmapError(f"{p}: truncated raw depth header")
        w, h = RAW_DEPTH_HEADER.unpack(head)
    if (w, h) != (kf.camera.width, kf.camera.height):
        raise SubmapError(f"{loc}: keyframe {kf.id} depth {p} is {w}x{h}, camera is "
                          f"{kf.camera.width}x{kf.camera.height} (dimension mismatch)")


def submap_to_dict(m: Submap, base: Path) -> dict:
    cams = {kf.camera for kf in m.keyframes}
    shared = next(iter(cams)) if len(cams) == 1 else None
    kfs = []
    for kf in m.keyframes:
        e = {"id": kf.id, "pose": _pose_to_list(kf.pose_world_to_cam),
             "depth": os.path.relpath(kf.depth_path, base),
             "image": os.path.relpath(kf.image_path, base) if kf.image_path else None,
             "observations": list(kf.observed_point_ids)}
        if kf.depth_scale != 1.0:
            e["depth_scale"] = kf.depth_scale
        if shared is None:
            e["camera"] = kf.camera.to_dict()
        kfs.append(e)
    doc = {"id": m.id}
    if shared is not None:
        doc["camera"] = shared.to_dict()
    doc["keyframes"] = kfs
    doc["points"] = [[int(pid), *map(float, m.points[pid].position)] for pid in sorted(m.points)]
    return doc


def save_submap(m: Submap, manifest_path) -> None:
    """Write the manifest; depth/image files are referenced, not copied."""
    manifest_path = Path(manifest_path)
    doc = submap_to_dict(m, manifest_path.parent.resolve())
    _atomic_write(manifest_path, (json.dumps(doc, indent=1) + "\n").encode())


# ---------------------------------------------------------------------------
# trajectories: one "id tx ty tz qx qy qz qw" line per frame, camera -> world
# ---------------------------------------------------------------------------

def read_trajectory_file(path) -> list:
    out = []
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise SubmapError(f"{path}: cannot read trajectory ({exc.strerror})") from exc
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) != 8:
            raise SubmapError(f"{path}:{lineno}: expected 'id tx ty tz qx qy qz qw', got {len(tok)} fields")
        try:
            fid = int(tok[0])
            pose = _pose_from_list([float(t) for t in tok[1:]], f"{path}:{lineno}")
        except ValueError as exc:
            raise SubmapError(f"{path}:{lineno}: {exc}") from exc
        out.append((fid, pose))
    return out


def write_trajectory_file(path, entries) -> None:
    lines = ["# id tx ty tz qx qy qz qw (camera to world)"]
    for fid, pose in entries:
        lines.append(" ".join([str(int(fid))] + [repr(v) for v in _pose_to_list(pose)]))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())
