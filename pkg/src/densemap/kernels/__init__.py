"""Hot numeric kernels.

Each kernel has a numba implementation and a vectorized numpy one with the
same floating-point operation order. ``backend`` arguments accept
``"numba"``, ``"numpy"`` or ``None`` (numba when available, see `densemap._accel`).
"""

from .._accel import use_numba


def resolve_backend(backend=None) -> str:
    if backend is None:
        return "numba" if use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not use_numba():
        raise RuntimeError("numba backend requested but numba is disabled or unavailable")
    return backend
