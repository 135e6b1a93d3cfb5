"""Marching cubes with face-consistent ambiguity resolution.

A cell's surface is assembled from per-face segments: each cube face with two
sign changes gets one segment, and an ambiguous face (diagonal corners with equal
sign) is split by the sign of its centre value, the mean of the four corners.
Adjacent cells therefore resolve a shared face identically, so the mesh has no
cracks. Because the decision flips with the field, negating every value yields
the same loops with reversed winding.

Segments chain into closed loops over the cell's crossing edges, and each loop
is fan-triangulated from its smallest edge id. When that fan would put a
diagonal inside a cube face (possible only when a loop visits all four
crossings of an ambiguous face), the neighbouring cell could emit the same
triangle with opposite winding; such loops are instead fanned around an extra
vertex at the centroid of the loop. On non-ambiguous cases the result is the
same polygons as the classic 256-entry table in `mc_tables`. Triangle normals
point from the negative (inside) side to the positive side.

Triangle corner ids 0-11 are cube edges; ``CENTRE + k`` is the centre vertex of
the cell's k-th centred loop.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .mc_tables import CORNERS, EDGE_CORNERS

# (cyclic corner order, outward normal)
FACES = (
    ((0, 3, 7, 4), (-1, 0, 0)),
    ((1, 2, 6, 5), (1, 0, 0)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((3, 2, 6, 7), (0, 1, 0)),
    ((0, 1, 2, 3), (0, 0, -1)),
    ((4, 5, 6, 7), (0, 0, 1)),
)

_EDGE_OF = {}
for _e, (_a, _b) in enumerate(EDGE_CORNERS):
    _EDGE_OF[(int(_a), int(_b))] = _e
    _EDGE_OF[(int(_b), int(_a))] = _e

EDGE_AXIS = np.array([int(np.argmax(CORNERS[b] - CORNERS[a])) for a, b in EDGE_CORNERS], dtype=np.int64)
_EDGE_MID = (CORNERS[EDGE_CORNERS[:, 0]] + CORNERS[EDGE_CORNERS[:, 1]]) / 2.0
MAX_TRIS = 12
CENTRE = 12
MAX_CENTRES = 4

_EDGE_FACES = [set() for _ in range(12)]
for _f, (_c, _) in enumerate(FACES):
    for _i in range(4):
        _EDGE_FACES[_EDGE_OF[(_c[_i], _c[(_i + 1) % 4])]].add(_f)


def _face_segments(case: int, face: int, center_inside: bool):
    corners, normal = FACES[face]
    inside = [(case >> c) & 1 for c in corners]
    edges = [_EDGE_OF[(corners[i], corners[(i + 1) % 4])] for i in range(4)]
    crossing = [edges[i] for i in range(4) if inside[i] != inside[(i + 1) % 4]]
    n = np.array(normal, dtype=float)
    pos = CORNERS[list(corners)].astype(float)
    segs = []
    if len(crossing) == 2:
        ins = pos[[i for i in range(4) if inside[i]]]
        out = pos[[i for i in range(4) if not inside[i]]]
        segs.append((crossing[0], crossing[1], out.mean(0) - ins.mean(0)))
    elif len(crossing) == 4:
        # Cut off the corners whose class is NOT connected through the face centre.
        cut_inside = not center_inside
        for i in range(4):
            if bool(inside[i]) == cut_inside:
                a, b = edges[(i - 1) % 4], edges[i]
                w = pos[i] - (_EDGE_MID[a] + _EDGE_MID[b]) / 2
                segs.append((a, b, -w if inside[i] else w))
    out = []
    for a, b, m in segs:
        d = np.cross(m, n)
        if np.dot(_EDGE_MID[b] - _EDGE_MID[a], d) < 0:
            a, b = b, a
        out.append((a, b))
    return out


def _fan_ok(loop) -> bool:
    """True if no diagonal of the fan from loop[0] lies in a cube face."""
    a = _EDGE_FACES[loop[0]]
    return not any(a & _EDGE_FACES[b] for b in loop[2:-1])


def cell_triangles(case: int, face_bits: int = 0) -> tuple:
    """Triangles for a cell; bit f of ``face_bits`` marks face f's centre as inside."""
    return cell_polygons(case, face_bits)[0]


@lru_cache(maxsize=None)
def cell_polygons(case: int, face_bits: int = 0):
    """``(triangles, centred_loops)`` for a cell.

    ``centred_loops[k]`` lists the edges whose vertices average to centre
    vertex ``CENTRE + k``.
    """
    nxt = {}
    for f in range(6):
        for a, b in _face_segments(case, f, bool((face_bits >> f) & 1)):
            if a in nxt:
                raise AssertionError(f"inconsistent loop at case {case} bits {face_bits}")
            nxt[a] = b
    tris, centred = [], []
    remaining = set(nxt)
    while remaining:
        start = min(remaining)
        loop = [start]
        e = nxt[start]
        while e != start:
            loop.append(e)
            e = nxt[e]
        remaining.difference_update(loop)
        if _fan_ok(loop):
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i], loop[i + 1]))
        else:
            c = CENTRE + len(centred)
            centred.append(tuple(loop))
            for i in range(len(loop)):
                tris.append((c, loop[i], loop[(i + 1) % len(loop)]))
    return tuple(tris), tuple(centred)


def _face_center_bits(values, inside):
    bits = np.zeros(len(values), dtype=np.int64)
    for f, (c, _) in enumerate(FACES):
        i0, i1, i2, i3 = (inside[:, k] for k in c)
        amb = (i0 == i2) & (i1 == i3) & (i0 != i1)
        centre = (values[:, c[0]] + values[:, c[1]] + values[:, c[2]] + values[:, c[3]]) < 0
        bits |= (amb & centre).astype(np.int64) << f
    return bits


def triangulate_cells(values, with_centres: bool = False):
    """Triangles for a batch of cells.

    ``values`` is (N, 8) corner values in `mc_tables.CORNERS` order. Returns
    ``(cell_index (T,), ids (T, 3))``; with ``with_centres`` also
    ``(centre_cell (K,), centre_slot (K,), centre_edges (K, 12))``, the edge
    lists padded with -1.
    """
    values = np.asarray(values, dtype=np.float64)
    inside = values < 0
    case = (inside.astype(np.int64) << np.arange(8)).sum(axis=1)
    active = (case != 0) & (case != 255)
    idx = np.nonzero(active)[0]
    empty = (np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64))
    no_centres = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 12), dtype=np.int64))
    if len(idx) == 0:
        return empty + no_centres if with_centres else empty
    key = case[idx] * 64 + _face_center_bits(values[idx], inside[idx])
    ukeys, inv = np.unique(key, return_inverse=True)
    # a centred 12-gon gives 12 triangles; fans give at most 12 as well
    table = np.full((len(ukeys), MAX_TRIS, 3), -1, dtype=np.int64)
    ctable = np.full((len(ukeys), MAX_CENTRES, 12), -1, dtype=np.int64)
    for r, k in enumerate(ukeys):
        t, cl = cell_polygons(int(k) // 64, int(k) % 64)
        if t:
            table[r, :len(t)] = t
        for j, loop in enumerate(cl):
            ctable[r, j, :len(loop)] = loop
    tri = table[inv]
    ok = tri[:, :, 0] >= 0
    cell = np.broadcast_to(idx[:, None], ok.shape)[ok]
    if not with_centres:
        return cell, tri[ok]
    ce = ctable[inv]
    cok = ce[:, :, 0] >= 0
    ccell = np.broadcast_to(idx[:, None], cok.shape)[cok]
    cslot = np.broadcast_to(np.arange(MAX_CENTRES)[None, :], cok.shape)[cok]
    return cell, tri[ok], ccell, cslot, ce[cok]
