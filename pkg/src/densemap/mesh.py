"""Triangle meshes and PLY (ascii / binary little-endian) I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class PlyError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors must have one row per vertex")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.triangles[:, ::-1].copy(),
                            None if self.colors is None else self.colors.copy())

    def edge_counts(self):
        """Undirected edges (E, 2) with the number of triangles using each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def triangle_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _vertex_dtype(with_color: bool, little: bool = True):
    e = "<" if little else ">"
    fields = [("x", e + "f4"), ("y", e + "f4"), ("z", e + "f4")]
    if with_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    return np.dtype(fields)


def encode_ply(vertices, triangles=None, colors=None, binary: bool = True) -> bytes:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    with_faces = triangles is not None
    tris = np.asarray(triangles if with_faces else np.zeros((0, 3)), dtype=np.int64).reshape(-1, 3)
    with_color = colors is not None
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    if with_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if with_faces:
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    vrec = np.empty(len(vertices), dtype=_vertex_dtype(with_color))
    vrec["x"], vrec["y"], vrec["z"] = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    if with_color:
        c = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        vrec["red"], vrec["green"], vrec["blue"] = c[:, 0], c[:, 1], c[:, 2]

    if binary:
        body = vrec.tobytes()
        if with_faces:
            frec = np.empty(len(tris), dtype=np.dtype([("n", "u1"), ("i", "<i4", (3,))]))
            frec["n"] = 3
            frec["i"] = tris
            body += frec.tobytes()
        return head + body

    lines = []
    for r in vrec:
        xyz = " ".join(repr(float(np.float32(r[k]))) for k in ("x", "y", "z"))
        if with_color:
            xyz += f" {r['red']} {r['green']} {r['blue']}"
        lines.append(xyz)
    for t in tris:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    return head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def save_mesh(mesh: TriangleMesh, path, binary: bool = True) -> None:
    _atomic_write(path, encode_ply(mesh.vertices, mesh.triangles, mesh.colors, binary=binary))


def save_points(points, path, colors=None, binary: bool = True) -> None:
    _atomic_write(path, encode_ply(points, None, colors, binary=binary))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError(f"{path}: not a PLY file (missing magic or end_header)")
    nl = data.find(b"\n", end)
    body_start = nl + 1 if nl >= 0 else len(data)
    fmt = None
    elements = []
    for lineno, raw in enumerate(data[:end].decode("ascii", "replace").splitlines(), start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"{path}:{lineno}: property before any element")
            if tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyError(f"{path}:{lineno}: unknown list types {tok[2]}/{tok[3]}")
                elements[-1]["props"].append((tok[4], "list", tok[2], tok[3]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PlyError(f"{path}:{lineno}: unknown property type {tok[1]}")
                elements[-1]["props"].append((tok[2], tok[1]))
        else:
            raise PlyError(f"{path}:{lineno}: unexpected header line {raw!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_binary(data, off, elements, little, path):
    e = "<" if little else ">"
    out = {}
    for el in elements:
        props = el["props"]
        n = el["count"]
        if all(len(p) == 2 for p in props):
            dt = np.dtype([(p[0], e + _PLY_TYPES[p[1]]) for p in props])
            size = dt.itemsize * n
            if off + size > len(data):
                raise PlyError(f"{path}: truncated {el['name']} data")
            out[el["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=off)
            off += size
            continue
        # Faces: fast path for uniform triangle lists, generic loop otherwise.
        if len(props) == 1 and props[0][1] == "list":
            _, _, ct, it = props[0]
            cdt, idt = np.dtype(e + _PLY_TYPES[ct]), np.dtype(e + _PLY_TYPES[it])
            tri_dt = np.dtype([("n", cdt), ("i", idt, (3,))])
            size = tri_dt.itemsize * n
            if off + size <= len(data):
                rec = np.frombuffer(data, dtype=tri_dt, count=n, offset=off)
                if n == 0 or np.all(rec["n"] == 3):
                    out[el["name"]] = {props[0][0]: rec["i"].astype(np.int64)}
                    off += size
                    continue
        rows = {p[0]: [] for p in props}
        for _ in range(n):
            for p in props:
                if p[1] == "list":
                    cdt, idt = np.dtype(e + _PLY_TYPES[p[2]]), np.dtype(e + _PLY_TYPES[p[3]])
                    if off + cdt.itemsize > len(data):
                        raise PlyError(f"{path}: truncated {el['name']} data")
                    cnt = int(np.frombuffer(data, cdt, 1, off)[0])
                    off += cdt.itemsize
                    if off + cnt * idt.itemsize > len(data):
                        raise PlyError(f"{path}: truncated {el['name']} data")
                    rows[p[0]].append(np.frombuffer(data, idt, cnt, off).astype(np.int64))
                    off += cnt * idt.itemsize
                else:
                    dt = np.dtype(e + _PLY_TYPES[p[1]])
                    if off + dt.itemsize > len(data):
                        raise PlyError(f"{path}: truncated {el['name']} data")
                    rows[p[0]].append(np.frombuffer(data, dt, 1, off)[0])
                    off += dt.itemsize
        out[el["name"]] = rows
    return out


def _read_ascii(data, off, elements, path):
    tokens = data[off:].decode("ascii", "replace").split()
    pos = 0
    out = {}
    for el in elements:
        props = el["props"]
        if all(len(p) == 2 for p in props):
            k = len(props) * el["count"]
            if pos + k > len(tokens):
                raise PlyError(f"{path}: truncated {el['name']} data")
            arr = np.array(tokens[pos:pos + k], dtype=np.float64).reshape(el["count"], len(props))
            pos += k
            dt = np.dtype([(p[0], _PLY_TYPES[p[1]]) for p in props])
            rec = np.empty(el["count"], dtype=dt)
            for i, p in enumerate(props):
                rec[p[0]] = arr[:, i]
            out[el["name"]] = rec
            continue
        rows = {p[0]: [] for p in props}
        try:
            for _ in range(el["count"]):
                for p in props:
                    if p[1] == "list":
                        cnt = int(tokens[pos])
                        rows[p[0]].append(np.array(tokens[pos + 1:pos + 1 + cnt], dtype=np.int64))
                        pos += 1 + cnt
                    else:
                        rows[p[0]].append(float(tokens[pos]))
                        pos += 1
        except (IndexError, ValueError) as exc:
            raise PlyError(f"{path}: malformed {el['name']} data ({exc})") from exc
        out[el["name"]] = rows
    return out


def read_ply(path) -> dict:
    data = Path(path).read_bytes()
    fmt, elements, off = _parse_header(data, path)
    if fmt == "ascii":
        return _read_ascii(data, off, elements, path)
    return _read_binary(data, off, elements, fmt == "binary_little_endian", path)


def load_mesh(path) -> TriangleMesh:
    els = read_ply(path)
    if "vertex" not in els:
        raise PlyError(f"{path}: no vertex element")
    v = els["vertex"]
    verts = np.stack([np.asarray(v["x"], dtype=np.float64), np.asarray(v["y"], dtype=np.float64),
                      np.asarray(v["z"], dtype=np.float64)], axis=1) if len(v["x"]) else np.zeros((0, 3))
    colors = None
    names = v.dtype.names if hasattr(v, "dtype") else tuple(v)
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(v[c], dtype=np.uint8) for c in ("red", "green", "blue")], axis=1)
    tris = np.zeros((0, 3), dtype=np.int64)
    if "face" in els:
        f = els["face"]
        key = "vertex_indices" if "vertex_indices" in f else ("vertex_index" if "vertex_index" in f else None)
        if key is None:
            raise PlyError(f"{path}: face element lacks vertex_indices")
        idx = f[key]
        if isinstance(idx, np.ndarray):
            tris = idx.reshape(-1, 3)
        else:
            out = []
            for poly in idx:
                if len(poly) < 3:
                    raise PlyError(f"{path}: face with {len(poly)} vertices")
                for k in range(1, len(poly) - 1):
                    out.append((poly[0], poly[k], poly[k + 1]))
            if out:
                tris = np.array(out, dtype=np.int64)
    try:
        return TriangleMesh(verts, tris, colors)
    except ValueError as exc:
        raise PlyError(f"{path}: {exc}") from exc


def load_points(path) -> np.ndarray:
    return load_mesh(path).vertices
