"""Projective TSDF update over a batch of 16^3 voxel blocks.

Voxel ``g`` (integer global index) sits at world position ``g * voxel_size``.
For each voxel: transform to the camera, project, read depth bilinearly (all
four neighbours must be valid), ``sdf = scale * depth - z``; voxels with
``sdf < -truncation`` are skipped, others get a running-average update of
``clamp(sdf / truncation, -1, 1)``.
"""

import numpy as np

from .._accel import njit
from . import resolve_backend

BLOCK = 16
Z_MIN = 1e-6


@njit(cache=True, nogil=True)
def _integrate_numba(tsdf, weight, color, has_color, blocks, origins, R, t, fx, fy, cx, cy,
                     depth, dvalid, rgb, scale, voxel_size, trunc, max_weight):
    h, w = depth.shape
    for bi in range(blocks.shape[0]):
        b = blocks[bi]
        for i in range(BLOCK):
            px = (origins[bi, 0] + i) * voxel_size
            for j in range(BLOCK):
                py = (origins[bi, 1] + j) * voxel_size
                for k in range(BLOCK):
                    pz = (origins[bi, 2] + k) * voxel_size
                    xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
                    yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
                    zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
                    if not zc > Z_MIN:
                        continue
                    u = fx * xc / zc + cx
                    v = fy * yc / zc + cy
                    if not (u >= 0 and u <= w - 1 and v >= 0 and v <= h - 1):
                        continue
                    u0 = min(int(np.floor(u)), max(w - 2, 0))
                    v0 = min(int(np.floor(v)), max(h - 2, 0))
                    u1 = min(u0 + 1, w - 1)
                    v1 = min(v0 + 1, h - 1)
                    if not (dvalid[v0, u0] and dvalid[v0, u1] and dvalid[v1, u0] and dvalid[v1, u1]):
                        continue
                    a = u - u0
                    bb = v - v0
                    d = ((1 - a) * (1 - bb) * depth[v0, u0] + a * (1 - bb) * depth[v0, u1]
                         + (1 - a) * bb * depth[v1, u0] + a * bb * depth[v1, u1])
                    sdf = scale * d - zc
                    if sdf < -trunc:
                        continue
                    x = sdf / trunc
                    if x > 1.0:
                        x = 1.0
                    elif x < -1.0:
                        x = -1.0
                    w_old = float(weight[b, i, j, k])
                    tsdf[b, i, j, k] = (w_old * tsdf[b, i, j, k] + x) / (w_old + 1.0)
                    if has_color:
                        ru = int(np.floor(u + 0.5))
                        rv = int(np.floor(v + 0.5))
                        for c in range(3):
                            color[b, i, j, k, c] = (w_old * color[b, i, j, k, c] + rgb[rv, ru, c]) / (w_old + 1.0)
                    weight[b, i, j, k] = min(w_old + 1.0, max_weight)


def _integrate_numpy(tsdf, weight, color, has_color, blocks, origins, R, t, fx, fy, cx, cy,
                     depth, dvalid, rgb, scale, voxel_size, trunc, max_weight, batch=64):
    h, w = depth.shape
    nvox = BLOCK ** 3
    loc = np.indices((BLOCK, BLOCK, BLOCK)).reshape(3, -1).T
    # flat views: voxel (b, i, j, k) lives at b * nvox + local index
    tsdf_f, weight_f = tsdf.reshape(-1), weight.reshape(-1)
    color_f = color.reshape(-1, 3) if has_color else None
    dflat, vflat = depth.reshape(-1), dvalid.reshape(-1)
    for b0 in range(0, len(blocks), batch):
        bl = blocks[b0:b0 + batch]
        g = (origins[b0:b0 + batch, None, :] + loc[None]).reshape(-1, 3)
        px, py, pz = g[:, 0] * voxel_size, g[:, 1] * voxel_size, g[:, 2] * voxel_size
        zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        front = np.nonzero(zc > Z_MIN)[0]
        px, py, pz, zc = px[front], py[front], pz[front], zc[front]
        xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        u = fx * xc / zc + cx
        v = fy * yc / zc + cy
        inside = np.nonzero((u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1))[0]
        sel, u, v, zc = front[inside], u[inside], v[inside], zc[inside]
        u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
        v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
        u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
        i00, i01, i10, i11 = v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1
        a, bb = u - u0, v - v0
        d = ((1 - a) * (1 - bb) * dflat[i00] + a * (1 - bb) * dflat[i01]
             + (1 - a) * bb * dflat[i10] + a * bb * dflat[i11])
        sdf = scale * d - zc
        ok = np.nonzero(vflat[i00] & vflat[i01] & vflat[i10] & vflat[i11] & (sdf >= -trunc))[0]
        if len(ok) == 0:
            continue
        sel = sel[ok]
        x = np.clip(sdf[ok] / trunc, -1.0, 1.0)
        fi = bl[sel // nvox] * nvox + sel % nvox
        w_old = weight_f[fi].astype(np.float64)
        tsdf_f[fi] = (w_old * tsdf_f[fi] + x) / (w_old + 1.0)
        if has_color:
            ru = np.floor(u[ok] + 0.5).astype(np.int64)
            rv = np.floor(v[ok] + 0.5).astype(np.int64)
            col = rgb[rv, ru].astype(np.float64)
            color_f[fi] = (w_old[:, None] * color_f[fi] + col) / (w_old[:, None] + 1.0)
        weight_f[fi] = np.minimum(w_old + 1.0, max_weight)


def integrate_blocks(tsdf, weight, color, blocks, origins, R, t, cam, depth, dvalid, rgb,
                     scale, voxel_size, trunc, max_weight, backend=None):
    """Update ``tsdf``/``weight``/``color`` in place for the listed block indices."""
    has_color = rgb is not None and color is not None
    if rgb is None:
        rgb = np.zeros((1, 1, 3), dtype=np.uint8)
    if color is None:
        color = np.zeros((1, 1, 1, 1, 3), dtype=np.float32)
    args = (tsdf, weight, color, has_color,
            np.ascontiguousarray(blocks, dtype=np.int64), np.ascontiguousarray(origins, dtype=np.int64),
            np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
            np.ascontiguousarray(depth, dtype=np.float64), np.ascontiguousarray(dvalid, dtype=np.bool_),
            np.ascontiguousarray(rgb, dtype=np.uint8), float(scale), float(voxel_size), float(trunc),
            float(max_weight))
    if resolve_backend(backend) == "numba":
        _integrate_numba(*args)
    else:
        _integrate_numpy(*args)
