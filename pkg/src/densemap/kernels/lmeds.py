"""Median-of-squared-residuals evaluation for LMedS scale proposals.

For proposal j with scale s_j, the score is the upper median (index
floor((n-1)/2) after sorting) of ||X_k - s_j Xd_k||^2 over all k != j.
Squared residuals are always formed as ``dx*dx + dy*dy + dz*dz`` so both
backends agree bit for bit.
"""

import numpy as np

from .._accel import njit
from . import resolve_backend


@njit(cache=True, nogil=True)
def _proposal_medians_numba(X, Xd, scales, prop_idx):
    n = X.shape[0]
    m = prop_idx.shape[0]
    out = np.empty(m)
    buf = np.empty(n - 1)
    mid = (n - 1) // 2
    for p in range(m):
        j = prop_idx[p]
        s = scales[j]
        c = 0
        for k in range(n):
            if k == j:
                continue
            dx = X[k, 0] - s * Xd[k, 0]
            dy = X[k, 1] - s * Xd[k, 1]
            dz = X[k, 2] - s * Xd[k, 2]
            buf[c] = dx * dx + dy * dy + dz * dz
            c += 1
        out[p] = np.partition(buf, mid)[mid]
    return out


def _proposal_medians_numpy(X, Xd, scales, prop_idx, block=256):
    n = X.shape[0]
    mid = (n - 1) // 2
    out = np.empty(len(prop_idx))
    for b0 in range(0, len(prop_idx), block):
        idx = prop_idx[b0:b0 + block]
        s = scales[idx][:, None]
        dx = X[None, :, 0] - s * Xd[None, :, 0]
        dy = X[None, :, 1] - s * Xd[None, :, 1]
        dz = X[None, :, 2] - s * Xd[None, :, 2]
        e2 = dx * dx + dy * dy + dz * dz
        # the excluded self-residual sorts last, so index mid still selects among the n-1 others
        e2[np.arange(len(idx)), idx] = np.inf
        out[b0:b0 + len(idx)] = np.partition(e2, mid, axis=1)[:, mid]
    return out


def proposal_medians(X, Xd, scales, prop_idx, backend=None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    Xd = np.ascontiguousarray(Xd, dtype=np.float64)
    scales = np.ascontiguousarray(scales, dtype=np.float64)
    prop_idx = np.ascontiguousarray(prop_idx, dtype=np.int64)
    if X.shape[0] < 2:
        raise ValueError("need at least two pairs")
    if resolve_backend(backend) == "numba":
        return _proposal_medians_numba(X, Xd, scales, prop_idx)
    return _proposal_medians_numpy(X, Xd, scales, prop_idx)


def row_norms(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return np.sqrt(A[:, 0] * A[:, 0] + A[:, 1] * A[:, 1] + A[:, 2] * A[:, 2])
