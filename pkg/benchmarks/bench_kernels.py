"""Compare the numba and numpy backends of the two hot kernels.

1. LMedS proposal medians: O(n^2) residuals for n point pairs.
2. TSDF integration: one view of the synthetic tube fused into a fresh volume.

Both backends must agree bit-for-bit; the script checks that before timing.
Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import time

import numpy as np

from densemap.fusion import TsdfVolume, _band_blocks, default_voxel_size
from densemap.kernels.lmeds import proposal_medians
from densemap.kernels.tsdf import BLOCK, integrate_blocks
from densemap.synthetic import DEFAULT_CAMERA, AnalyticScene, camera_poses, render_depth


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_lmeds(n, repeat):
    rng = np.random.default_rng(0)
    Xd = rng.uniform(-1, 1, (n, 3)) + [0, 0, 3]
    X = Xd * 1.3 + rng.normal(0, 1e-3, (n, 3))
    scales = np.linalg.norm(X, axis=1) / np.linalg.norm(Xd, axis=1)
    idx = np.arange(n)
    a = proposal_medians(X, Xd, scales, idx, backend="numba")
    b = proposal_medians(X, Xd, scales, idx, backend="numpy")
    assert np.array_equal(a, b), "backends disagree on LMedS medians"
    return {be: best_of(lambda be=be: proposal_medians(X, Xd, scales, idx, backend=be), repeat)
            for be in ("numba", "numpy")}


def bench_tsdf(repeat):
    scene = AnalyticScene.tube(1.0, 5.0)
    cam = DEFAULT_CAMERA
    pose = camera_poses(scene, 1, np.random.default_rng(0))[0]
    d = render_depth(scene, pose, cam)
    voxel = default_voxel_size([d], [cam])

    def run(backend):
        vol = TsdfVolume(voxel)
        keys = _band_blocks(vol, d, 1.0, pose, cam, 1)
        idx = vol.allocate(keys)
        integrate_blocks(vol.tsdf, vol.weight, None, idx, keys * BLOCK, pose.R, pose.translation, cam,
                         d.values, d.valid, None, 1.0, voxel, vol.truncation, vol.max_weight, backend=backend)
        return vol

    va, vb = run("numba"), run("numpy")
    assert np.array_equal(va.tsdf[:va.n_blocks], vb.tsdf[:vb.n_blocks]), "backends disagree on TSDF"
    out = {be: best_of(lambda be=be: run(be), repeat) for be in ("numba", "numpy")}
    return out, va.n_blocks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"{'kernel':<28}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for n in (100, 300, 500, 1000):
        t = bench_lmeds(n, args.repeat)
        print(f"{f'lmeds medians n={n}':<28}{1e3 * t['numba']:>12.2f}{1e3 * t['numpy']:>12.2f}"
              f"{t['numpy'] / t['numba']:>9.1f}x")
    t, nb = bench_tsdf(args.repeat)
    print(f"{f'tsdf one view ({nb} blocks)':<28}{1e3 * t['numba']:>12.2f}{1e3 * t['numpy']:>12.2f}"
          f"{t['numpy'] / t['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
