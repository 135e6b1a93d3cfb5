"""Independent reference implementations used as test oracles.

These are deliberately naive (pure-Python loops, brute force, 1-D search) and
share no code with the package.
"""

import math

import numpy as np
from scipy.optimize import minimize_scalar


def _norm(v):
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def lmeds_bruteforce(ids, X, Xd):
    """(s, min_median) by the O(n^2) definition; ties go to the smaller id.

    The median over the n - 1 residuals k != j is the upper median.
    """
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    X = [list(map(float, X[i])) for i in order]
    Xd = [list(map(float, Xd[i])) for i in order]
    n = len(X)
    best = None
    for j in range(n):
        s = _norm(X[j]) / _norm(Xd[j])
        r = []
        for k in range(n):
            if k == j:
                continue
            dx = X[k][0] - s * Xd[k][0]
            dy = X[k][1] - s * Xd[k][1]
            dz = X[k][2] - s * Xd[k][2]
            r.append(dx * dx + dy * dy + dz * dz)
        r.sort()
        med = r[len(r) // 2]
        if best is None or med < best[1]:
            best = (s, med)
    return best


def huber_minimizer(X, Xd, delta, bracket):
    """Minimize the Huber objective of ||X - s Xd|| over s by bounded 1-D search."""
    X = np.asarray(X, float)
    Xd = np.asarray(Xd, float)

    def f(s):
        e = np.sqrt(np.sum((X - s * Xd) ** 2, axis=1))
        if delta <= 0:
            return 0.5 * np.sum(e * e)
        return np.sum(np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta)))

    res = minimize_scalar(f, bounds=bracket, method="bounded", options={"xatol": 1e-13, "maxiter": 2000})
    return res.x


def nearest_bruteforce(model, gt):
    """(distance, index) of each model point's nearest gt point; ties -> smaller index."""
    model = np.asarray(model, float)
    gt = np.asarray(gt, float)
    dist = np.empty(len(model))
    idx = np.empty(len(model), dtype=np.int64)
    for i, p in enumerate(model):
        best_d, best_j = math.inf, -1
        for j, q in enumerate(gt):
            dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best_d:
                best_d, best_j = d, j
        dist[i], idx[i] = best_d, best_j
    return dist, idx


def rotation_angle(R):
    """Rotation angle of R; atan2 keeps full precision near zero, unlike acos of the trace."""
    sin = 0.5 * math.sqrt((R[2][1] - R[1][2]) ** 2 + (R[0][2] - R[2][0]) ** 2 + (R[1][0] - R[0][1]) ** 2)
    cos = 0.5 * (R[0][0] + R[1][1] + R[2][2] - 1)
    return math.atan2(sin, cos)
