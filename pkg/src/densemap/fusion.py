"""Sparse chunked TSDF volume: projective integration and mesh extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import DepthMap, PinholeCamera, SE3Pose
from .kernels.tsdf import BLOCK, integrate_blocks
from .marching import CENTRE, EDGE_AXIS, MAX_CENTRES, triangulate_cells
from .mc_tables import CORNERS, EDGE_CORNERS
from .mesh import TriangleMesh, _atomic_write

_NEIGHBOURS = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)]


@dataclass
class FusionConfig:
    """TSDF parameters.

    ``voxel_size=None`` means the footprint of one depth pixel at the median
    scaled depth (see `default_voxel_size`); ``truncation=None`` means four voxels.
    """

    voxel_size: Optional[float] = None
    truncation: Optional[float] = None
    max_weight: float = 64.0
    min_extract_weight: float = 1.0
    alloc_stride: int = 1
    backend: Optional[str] = None

    def __post_init__(self):
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.voxel_size is not None and self.truncation is not None and self.truncation < self.voxel_size:
            raise ValueError("truncation must be >= voxel_size")
        if self.max_weight < 1:
            raise ValueError("max_weight must be >= 1")
        if self.alloc_stride < 1:
            raise ValueError("alloc_stride must be >= 1")

    def resolved(self, voxel_size: float) -> "FusionConfig":
        trunc = self.truncation if self.truncation is not None else 4.0 * voxel_size
        return FusionConfig(voxel_size, trunc, self.max_weight, self.min_extract_weight,
                            self.alloc_stride, self.backend)

    def to_dict(self) -> dict:
        return {"voxel_size": self.voxel_size, "truncation": self.truncation, "max_weight": self.max_weight,
                "min_extract_weight": self.min_extract_weight}


def default_voxel_size(depth_maps_scaled, cameras) -> float:
    """Median over all valid pixels of ``depth / f``, with ``f = (fx + fy) / 2``.

    This is the lateral extent of one pixel at the median scene depth: finer
    voxels cost memory and time without adding information from the depth maps.
    """
    vals = [np.asarray(d.values[d.valid]).ravel() / (0.5 * (c.fx + c.fy))
            for d, c in zip(depth_maps_scaled, cameras)]
    vals = np.concatenate(vals) if vals else np.zeros(0)
    if len(vals) == 0:
        raise ValueError("no valid depth to derive a voxel size from")
    return float(np.median(vals))


class TsdfVolume:
    """Sparse grid of 16^3 blocks keyed by integer block coordinates.

    Voxel with global index ``g`` is centred at ``g * voxel_size``; block ``c``
    holds global indices ``16 c .. 16 c + 15`` along each axis. tsdf values are
    normalized by the truncation distance.
    """

    def __init__(self, voxel_size: float, truncation: Optional[float] = None, max_weight: float = 64.0):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation if truncation is not None else 4.0 * voxel_size)
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be >= voxel_size")
        self.max_weight = float(max_weight)
        self._index = {}
        self._coords = np.zeros((0, 3), dtype=np.int64)
        self.tsdf = np.ones((0, BLOCK, BLOCK, BLOCK))
        self.weight = np.zeros((0, BLOCK, BLOCK, BLOCK), dtype=np.float32)
        self.color = None
        self._n = 0

    @classmethod
    def from_config(cls, cfg: FusionConfig) -> "TsdfVolume":
        if cfg.voxel_size is None:
            raise ValueError("FusionConfig.voxel_size must be resolved before building a volume")
        return cls(cfg.voxel_size, cfg.truncation, cfg.max_weight)

    @property
    def n_blocks(self) -> int:
        return self._n

    @property
    def block_coords(self) -> np.ndarray:
        return self._coords[:self._n]

    def block_index(self, key) -> Optional[int]:
        return self._index.get(tuple(int(k) for k in key))

    def _grow(self, need: int, with_color: bool):
        cap = len(self.tsdf)
        if need > cap:
            new = max(need, 2 * cap, 64)
            tsdf = np.ones((new, BLOCK, BLOCK, BLOCK))
            weight = np.zeros((new, BLOCK, BLOCK, BLOCK), dtype=np.float32)
            coords = np.zeros((new, 3), dtype=np.int64)
            tsdf[:cap], weight[:cap], coords[:cap] = self.tsdf, self.weight, self._coords
            self.tsdf, self.weight, self._coords = tsdf, weight, coords
            if self.color is not None:
                color = np.zeros((new, BLOCK, BLOCK, BLOCK, 3), dtype=np.float32)
                color[:cap] = self.color
                self.color = color
        if with_color and self.color is None:
            self.color = np.zeros((len(self.tsdf), BLOCK, BLOCK, BLOCK, 3), dtype=np.float32)

    def allocate(self, keys, with_color: bool = False) -> np.ndarray:
        """Ensure blocks exist for ``keys`` (K, 3); returns their storage indices."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(keys), dtype=np.int64)
        new = []
        for r, k in enumerate(map(tuple, keys.tolist())):
            idx = self._index.get(k)
            if idx is None:
                idx = self._n + len(new)
                self._index[k] = idx
                new.append(k)
            out[r] = idx
        self._grow(self._n + len(new), with_color)
        if new:
            self._coords[self._n:self._n + len(new)] = new
            self._n += len(new)
        return out

    def voxel_count(self, min_weight: float = 1.0) -> int:
        return int(np.count_nonzero(self.weight[:self._n] >= min_weight))

    def dump(self, path) -> None:
        """Raw block list: header (magic, n, voxel_size, truncation) then per block
        int64[3] coords, float64[16^3] tsdf, float32[16^3] weight."""
        n = self._n
        head = struct.pack("<8sqdd", b"DMTSDF01", n, self.voxel_size, self.truncation)
        body = b"".join(self._coords[i].astype("<i8").tobytes() + self.tsdf[i].astype("<f8").tobytes()
                        + self.weight[i].astype("<f4").tobytes() for i in range(n))
        _atomic_write(path, head + body)

    @classmethod
    def from_sdf(cls, sdf, lo, hi, voxel_size: float, truncation: Optional[float] = None) -> "TsdfVolume":
        """Volume filled from an analytic signed distance function over the box [lo, hi].

        Blocks are kept where some voxel has |sdf| <= truncation; voxels with
        sdf >= -truncation get weight 1, as a single integration would give.
        """
        vol = cls(voxel_size, truncation)
        lo_b = np.floor(np.asarray(lo) / (voxel_size * BLOCK)).astype(np.int64)
        hi_b = np.floor(np.asarray(hi) / (voxel_size * BLOCK)).astype(np.int64)
        loc = np.indices((BLOCK,) * 3).reshape(3, -1).T
        for bx in range(lo_b[0], hi_b[0] + 1):
            for by in range(lo_b[1], hi_b[1] + 1):
                for bz in range(lo_b[2], hi_b[2] + 1):
                    g = np.array([bx, by, bz]) * BLOCK + loc
                    d = np.asarray(sdf(g * voxel_size), dtype=np.float64)
                    if not np.any(np.abs(d) <= vol.truncation):
                        continue
                    i = vol.allocate([[bx, by, bz]])[0]
                    upd = d >= -vol.truncation
                    vol.tsdf[i].reshape(-1)[upd] = np.clip(d[upd] / vol.truncation, -1.0, 1.0)
                    vol.weight[i].reshape(-1)[upd] = 1.0
        return vol


def _band_blocks(vol: TsdfVolume, d: DepthMap, scale: float, pose: SE3Pose, cam: PinholeCamera,
                 stride: int) -> np.ndarray:
    """Block keys touched by the truncation band around the scaled depth."""
    vv, uu = np.nonzero(d.valid[::stride, ::stride])
    if len(uu) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    u = uu * stride
    v = vv * stride
    z = scale * d.values[v, u]
    step = 0.5 * vol.voxel_size
    ns = int(np.ceil(2 * vol.truncation / step)) + 1
    offs = np.linspace(-vol.truncation, vol.truncation, ns)
    zz = np.clip(z[:, None] + offs[None, :], 1e-6, None).ravel()
    rx = np.repeat((u - cam.cx) / cam.fx, ns)
    ry = np.repeat((v - cam.cy) / cam.fy, ns)
    pc = np.stack([rx * zz, ry * zz, zz], axis=1)
    inv = pose.inverse()
    pw = inv.apply(pc)
    gf = pw / vol.voxel_size
    g0 = np.floor(gf).astype(np.int64)
    keys = [np.floor_divide(g0, BLOCK)]
    # a point just past voxel 16c+15 also touches block c+1 along that axis
    edge = np.mod(g0, BLOCK) == BLOCK - 1
    for combo in _NEIGHBOURS:
        c = np.array(combo, dtype=bool)
        sel = edge[:, c].all(axis=1)
        if np.any(sel):
            keys.append(np.floor_divide(g0[sel] + c.astype(np.int64), BLOCK))
    keys = np.concatenate(keys)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    code = ((keys[:, 0] - lo[0]) * span[1] + (keys[:, 1] - lo[1])) * span[2] + (keys[:, 2] - lo[2])
    code = np.unique(code)
    out = np.empty((len(code), 3), dtype=np.int64)
    out[:, 2] = code % span[2] + lo[2]
    code //= span[2]
    out[:, 1] = code % span[1] + lo[1]
    out[:, 0] = code // span[1] + lo[0]
    return out


def integrate(vol: TsdfVolume, d: DepthMap, scale: float, color: Optional[np.ndarray], pose: SE3Pose,
              cam: PinholeCamera, alloc_stride: int = 1, backend=None) -> TsdfVolume:
    """Fuse one depth map, scaled by ``scale``, observed from ``pose`` (world -> camera)."""
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive, got {scale}")
    if (d.width, d.height) != (cam.width, cam.height):
        raise ValueError("depth map size does not match camera")
    if color is not None:
        color = np.asarray(color)
        if color.shape != (cam.height, cam.width, 3):
            raise ValueError(f"color image shape {color.shape} does not match camera")
    keys = _band_blocks(vol, d, scale, pose, cam, alloc_stride)
    if len(keys) == 0:
        return vol
    idx = vol.allocate(keys, with_color=color is not None)
    integrate_blocks(vol.tsdf, vol.weight, vol.color if color is not None else None, idx, keys * BLOCK,
                     pose.R, pose.translation, cam, d.values, d.valid, color, scale, vol.voxel_size,
                     vol.truncation, vol.max_weight, backend=backend)
    return vol


def _padded(vol: TsdfVolume, sel: np.ndarray):
    """(B, 17, 17, 17) tsdf/weight(/color) for blocks ``sel``, with the +1 faces from neighbours."""
    n = len(sel)
    P = BLOCK + 1
    T = np.ones((n, P, P, P))
    W = np.zeros((n, P, P, P), dtype=np.float32)
    C = np.zeros((n, P, P, P, 3), dtype=np.float32) if vol.color is not None else None
    T[:, :BLOCK, :BLOCK, :BLOCK] = vol.tsdf[sel]
    W[:, :BLOCK, :BLOCK, :BLOCK] = vol.weight[sel]
    if C is not None:
        C[:, :BLOCK, :BLOCK, :BLOCK] = vol.color[sel]
    coords = vol.block_coords[sel]
    for off in _NEIGHBOURS:
        rows, nbs = [], []
        for r, c in enumerate(coords.tolist()):
            j = vol._index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
            if j is not None:
                rows.append(r)
                nbs.append(j)
        if not rows:
            continue
        dst = tuple(slice(BLOCK, P) if o else slice(0, BLOCK) for o in off)
        src = tuple(slice(0, 1) if o else slice(0, BLOCK) for o in off)
        rows, nbs = np.array(rows), np.array(nbs)
        T[(rows,) + dst] = vol.tsdf[(nbs,) + src]
        W[(rows,) + dst] = vol.weight[(nbs,) + src]
        if C is not None:
            C[(rows,) + dst] = vol.color[(nbs,) + src]
    return coords, T, W, C


def extract_mesh(vol: TsdfVolume, cfg: Optional[FusionConfig] = None, batch: int = 128) -> TriangleMesh:
    """Zero level set of the fused tsdf as a watertight triangle mesh.

    Only cells whose eight corners all have weight >= ``min_extract_weight``
    contribute. Vertices are shared through a global edge key, so meshes are
    continuous across block borders.
    """
    min_w = cfg.min_extract_weight if cfg is not None else 1.0
    if vol.n_blocks == 0:
        return TriangleMesh.empty()
    order = np.lexsort(vol.block_coords.T[::-1])
    edge_keys, corner_refs, centre_refs, vals_a, vals_b, cols_a, cols_b, pos_a = [], [], [], [], [], [], [], []
    n_refs = n_centres = 0
    corner_off = CORNERS
    for b0 in range(0, len(order), batch):
        sel = order[b0:b0 + batch]
        coords, T, W, C = _padded(vol, sel)
        cell_vals = np.stack([T[:, ox:ox + BLOCK, oy:oy + BLOCK, oz:oz + BLOCK] for ox, oy, oz in corner_off], -1)
        cell_w = np.stack([W[:, ox:ox + BLOCK, oy:oy + BLOCK, oz:oz + BLOCK] for ox, oy, oz in corner_off], -1)
        good = (cell_w >= min_w).all(-1)
        neg = cell_vals < 0
        mixed = good & neg.any(-1) & ~neg.all(-1)
        bi, ci, cj, ck = np.nonzero(mixed)
        if len(bi) == 0:
            continue
        vals = cell_vals[bi, ci, cj, ck]
        cell, tids, ccell, cslot, cedges = triangulate_cells(vals, with_centres=True)
        if len(cell) == 0:
            continue
        origin = coords[bi] * BLOCK + np.stack([ci, cj, ck], 1)
        flat_t = tids.ravel()
        flat_tc = np.repeat(cell, 3)
        is_c = flat_t >= CENTRE
        # edge references: triangle corners on edges, then the loops of centre vertices
        cmask = cedges >= 0
        flat_e = np.concatenate([flat_t[~is_c], cedges[cmask]])
        flat_c = np.concatenate([flat_tc[~is_c], np.broadcast_to(ccell[:, None], cedges.shape)[cmask]])
        ref = np.empty(len(flat_t), dtype=np.int64)
        ref[~is_c] = n_refs + np.arange(int((~is_c).sum()))
        if len(ccell):
            ckey = ccell * MAX_CENTRES + cslot  # ascending by construction
            k = np.searchsorted(ckey, flat_tc[is_c] * MAX_CENTRES + flat_t[is_c] - CENTRE)
            ref[is_c] = -(n_centres + k + 1)
            members = np.full(cedges.shape, -1, dtype=np.int64)
            members[cmask] = n_refs + int((~is_c).sum()) + np.arange(int(cmask.sum()))
            centre_refs.append(members)
            n_centres += len(ccell)
        corner_refs.append(ref)
        n_refs += len(flat_e)
        ca, cb = EDGE_CORNERS[flat_e, 0], EDGE_CORNERS[flat_e, 1]
        ga = origin[flat_c] + CORNERS[ca]
        edge_keys.append(np.concatenate([ga, EDGE_AXIS[flat_e][:, None]], axis=1))
        vals_a.append(vals[flat_c, ca])
        vals_b.append(vals[flat_c, cb])
        pos_a.append(ga)
        if C is not None:
            ccols = np.stack([C[:, ox:ox + BLOCK, oy:oy + BLOCK, oz:oz + BLOCK] for ox, oy, oz in corner_off], -2)
            cc = ccols[bi, ci, cj, ck]
            cols_a.append(cc[flat_c, ca])
            cols_b.append(cc[flat_c, cb])
    if not edge_keys:
        return TriangleMesh.empty()
    keys = np.concatenate(edge_keys)
    va, vb = np.concatenate(vals_a), np.concatenate(vals_b)
    ga = np.concatenate(pos_a)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    code = (((keys[:, 0] - lo[0]) * span[1] + (keys[:, 1] - lo[1])) * span[2] + (keys[:, 2] - lo[2])) * span[3] \
        + (keys[:, 3] - lo[3])
    _, first, inv = np.unique(code, return_index=True, return_inverse=True)
    ta = va[first]
    tb = vb[first]
    frac = ta / (ta - tb)
    ax = keys[first, 3]
    g = ga[first].copy()
    # A vertex exactly on a lattice corner (tsdf == 0 there) is shared by every
    # edge meeting at that corner: key it by the corner instead of the edge.
    at_b = frac == 1.0
    g[np.arange(len(g))[at_b], ax[at_b]] += 1
    snapped = at_b | (frac == 0.0)
    vkey = np.concatenate([g - lo[:3] + 1, np.where(snapped, 3, ax)[:, None]], axis=1)
    vspan = vkey.max(axis=0) + 1
    vcode = ((vkey[:, 0] * vspan[1] + vkey[:, 1]) * vspan[2] + vkey[:, 2]) * vspan[3] + vkey[:, 3]
    _, vfirst, vinv = np.unique(vcode, return_index=True, return_inverse=True)
    p = ga[first].astype(np.float64)
    p[np.arange(len(p)), ax] += frac
    verts = p[vfirst] * vol.voxel_size
    colors = None
    if cols_a:
        cA, cB = np.concatenate(cols_a)[first], np.concatenate(cols_b)[first]
        colors = np.clip(np.rint(cA + frac[:, None] * (cB - cA)), 0, 255).astype(np.uint8)[vfirst]
    ref_vertex = vinv[inv]
    corners = np.concatenate(corner_refs)
    tris = np.where(corners >= 0, ref_vertex[np.maximum(corners, 0)], len(verts) - corners - 1).reshape(-1, 3)
    if centre_refs:
        # each centre vertex sits at the mean of its loop's vertices
        members = np.concatenate(centre_refs)
        mv = ref_vertex[np.maximum(members, 0)]
        m = (members >= 0)[:, :, None]
        cnt = m.sum(1)
        verts = np.concatenate([verts, (verts[mv] * m).sum(1) / cnt])
        if colors is not None:
            cmean = (colors[mv].astype(np.float64) * m).sum(1) / cnt
            colors = np.concatenate([colors, np.clip(np.rint(cmean), 0, 255).astype(np.uint8)])
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return TriangleMesh(verts, tris[keep], colors)
