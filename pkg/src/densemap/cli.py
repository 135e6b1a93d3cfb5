"""Command-line entry point: ``densemap {synth,densify,eval}``.

Configuration comes from an optional JSON file (``--config``) with command
line flags taking precedence. Recognised top-level config keys::

    manifests      list of submap manifest paths (densify, eval)
    out            output directory
    threads        worker threads for per-keyframe scale estimation (>= 1)
    log_level      DEBUG / INFO / WARNING / ERROR
    estimator      EstimatorConfig fields (t, max_proposals, min_pairs, ...)
    fusion         FusionConfig fields (voxel_size, truncation, max_weight, ...)
    snapshot_every write a progress mesh every N integrated keyframes (0 = off)
    eval           mesh, est_trajectory, gt_trajectory, gt_depth_dir,
                   gt_depth_scale, stride
    synth          scene, radius, length, n_keyframes, n_points, noise,
                   outlier_fraction, scale_min, scale_max, seed, depth_format

Outputs of ``densify`` (per run, in ``out``)::

    mesh_<submap id>.ply       binary little-endian PLY, one per submap
    diagnostics.json           see DIAGNOSTICS_SCHEMA

``eval`` writes ``report.json`` (see REPORT_SCHEMA). Every file is written to a
temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import Trajectory, accuracy, ate_rms, umeyama_sim3, unproject_gt_cloud
from .fusion import FusionConfig, TsdfVolume, default_voxel_size, extract_mesh, integrate
from .mesh import _atomic_write, load_mesh, save_mesh
from .scale import EstimatorConfig, ScaleEstimationError, estimate_keyframe_scale
from .submap import SubmapError, load_submap, read_depth, read_trajectory_file

log = logging.getLogger("densemap")

TOP_LEVEL_KEYS = {"manifests", "out", "threads", "log_level", "estimator", "fusion", "snapshot_every",
                  "eval", "synth"}
EVAL_KEYS = {"mesh", "est_trajectory", "gt_trajectory", "gt_depth_dir", "gt_depth_scale", "stride"}
SYNTH_KEYS = {"scene", "radius", "length", "n_keyframes", "n_points", "noise", "outlier_fraction",
              "scale_min", "scale_max", "seed", "depth_format"}

_NUM = {"type": "number"}
_INT = {"type": "integer"}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["manifest", "mesh", "n_matched_frames", "ate_rms", "rms_acc", "meda_acc",
                 "n_model_points", "n_gt_points", "gt_stride", "alignment"],
    "properties": {
        "manifest": {"type": "string"},
        "mesh": {"type": "string"},
        "n_matched_frames": _INT,
        "ate_rms": _NUM,
        "rms_acc": _NUM,
        "meda_acc": _NUM,
        "n_model_points": _INT,
        "n_gt_points": _INT,
        "gt_stride": _INT,
        "alignment": {
            "type": "object",
            "required": ["scale", "rotation_wxyz", "translation"],
            "properties": {
                "scale": _NUM,
                "rotation_wxyz": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
                "translation": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
            },
        },
    },
}

DIAGNOSTICS_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "submaps", "timings"],
    "properties": {
        "version": {"type": "string"},
        "config": {"type": "object"},
        "timings": {"type": "object"},
        "submaps": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "manifest", "mesh", "n_keyframes", "n_skipped", "skipped", "keyframes",
                             "voxel_size", "truncation", "n_vertices", "n_triangles", "n_blocks", "timings"],
                "properties": {
                    "id": _INT,
                    "n_keyframes": _INT,
                    "n_skipped": _INT,
                    "skipped": {"type": "array", "items": {"type": "object",
                                                           "required": ["kf_id", "reason"]}},
                    "keyframes": {"type": "array", "items": {"type": "object", "required": [
                        "kf_id", "n_pairs", "n_inliers", "s_lmeds", "sigma", "s_refined", "timings"]}},
                    "timings": {"type": "object", "required": [
                        "depth_load", "scale_alignment", "integration", "extraction"]},
                },
            },
        },
    },
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    unknown = set(cfg) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{p}: unknown config field(s) {sorted(unknown)}")
    for section, allowed in (("eval", EVAL_KEYS), ("synth", SYNTH_KEYS)):
        bad = set(cfg.get(section, {})) - allowed
        if bad:
            raise ConfigError(f"{p}: unknown field(s) {sorted(bad)} in '{section}'")
    return cfg


def _dataclass_from(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown field(s) {sorted(bad)} in '{section}'")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def _pick(flag, cfg: dict, key: str, default=None):
    return flag if flag is not None else cfg.get(key, default)


def _setup_logging(level: str):
    level = (level or "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError(f"log_level must be DEBUG, INFO, WARNING or ERROR, got {level!r}")
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# densify


def densify_submap(manifest, out_dir: Path, est_cfg: EstimatorConfig, fus_cfg: FusionConfig,
                   threads: int = 1, snapshot_every: int = 0) -> dict:
    """Scale-align, fuse and mesh one submap. Returns its diagnostics record."""
    t_start = time.perf_counter()
    m = load_submap(manifest)
    kfs = m.keyframes

    def one(kf):
        t0 = time.perf_counter()
        d = kf.load_depth()
        t1 = time.perf_counter()
        try:
            est = estimate_keyframe_scale(m, kf.id, d, est_cfg)
        except ScaleEstimationError as e:
            return kf, d, None, str(e), (t1 - t0, time.perf_counter() - t1)
        return kf, d, est, None, (t1 - t0, time.perf_counter() - t1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, kfs))
    else:
        results = [one(kf) for kf in kfs]

    skipped, accepted = [], []
    for kf, d, est, err, _ in results:
        if est is None:
            log.warning("submap %d keyframe %d skipped: %s", m.id, kf.id, err)
            skipped.append({"kf_id": int(kf.id), "reason": err})
        else:
            accepted.append((kf, d, est))

    voxel = fus_cfg.voxel_size
    if voxel is None:
        if not accepted:
            raise ScaleEstimationError(f"submap {m.id}: no keyframe could be scale-aligned")
        voxel = default_voxel_size([d.scaled(est.s_refined) for _, d, est in accepted],
                                   [kf.camera for kf, _, _ in accepted])
    cfg = fus_cfg.resolved(voxel)
    vol = TsdfVolume.from_config(cfg)
    mesh_path = out_dir / f"mesh_{m.id}.ply"

    integ_times = {}
    for n_done, (kf, d, est) in enumerate(accepted, 1):
        t0 = time.perf_counter()
        rgb = kf.load_image()
        integrate(vol, d, est.s_refined, rgb, kf.pose_world_to_cam, kf.camera, cfg.alloc_stride, cfg.backend)
        integ_times[kf.id] = time.perf_counter() - t0
        if snapshot_every and n_done % snapshot_every == 0 and n_done < len(accepted):
            save_mesh(extract_mesh(vol, cfg), out_dir / f"mesh_{m.id}.snapshot.ply")

    t0 = time.perf_counter()
    mesh = extract_mesh(vol, cfg)
    save_mesh(mesh, mesh_path)
    t_extract = time.perf_counter() - t0
    log.info("submap %d: %d/%d keyframes fused, %d vertices, %d triangles -> %s", m.id, len(accepted),
             len(kfs), mesh.n_vertices, mesh.n_triangles, mesh_path)

    records = []
    for kf, d, est, err, (t_load, t_scale) in results:
        if est is None:
            continue
        rec = est.to_record()
        rec.pop("wall_time", None)
        rec["timings"] = {"depth_load": t_load, "scale_alignment": t_scale,
                          "integration": integ_times[kf.id]}
        records.append(rec)
    timings = {
        "depth_load": sum(r[4][0] for r in results),
        "scale_alignment": sum(r[4][1] for r in results),
        "integration": sum(integ_times.values()),
        "extraction": t_extract,
        "total": time.perf_counter() - t_start,
    }
    return {
        "id": int(m.id), "manifest": str(Path(manifest)), "mesh": mesh_path.name,
        "n_keyframes": len(kfs), "n_skipped": len(skipped), "skipped": skipped, "keyframes": records,
        "voxel_size": float(cfg.voxel_size), "truncation": float(cfg.truncation),
        "n_vertices": mesh.n_vertices, "n_triangles": mesh.n_triangles, "n_blocks": vol.n_blocks,
        "timings": timings,
    }


def cmd_densify(args) -> int:
    cfg = _load_config(args.config)
    _setup_logging(_pick(args.log_level, cfg, "log_level", "INFO"))
    manifests = args.manifests or cfg.get("manifests") or []
    if not manifests:
        raise ConfigError("no submap manifests given (positional arguments or 'manifests' in config)")
    for mpath in manifests:
        if not Path(mpath).is_file():
            raise ConfigError(f"{mpath}: manifest not found")
    out = _pick(args.out, cfg, "out")
    if out is None:
        raise ConfigError("no output directory given (--out or 'out' in config)")
    threads = int(_pick(args.threads, cfg, "threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    est_d = dict(cfg.get("estimator", {}))
    if args.t is not None:
        est_d["t"] = args.t
    if args.seed is not None:
        est_d["rng_seed"] = args.seed
    fus_d = dict(cfg.get("fusion", {}))
    if args.voxel_size is not None:
        fus_d["voxel_size"] = args.voxel_size
    est_cfg = _dataclass_from(EstimatorConfig, est_d, "estimator")
    fus_cfg = _dataclass_from(FusionConfig, fus_d, "fusion")
    snapshot_every = int(_pick(args.snapshot_every, cfg, "snapshot_every", 0))

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    subs = [densify_submap(mp, out_dir, est_cfg, fus_cfg, threads, snapshot_every) for mp in manifests]
    ids = [s["id"] for s in subs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate submap ids {ids}: meshes would overwrite each other")
    diag = {
        "version": __version__,
        "config": {"estimator": est_cfg.to_dict(), "fusion": fus_cfg.to_dict(), "threads": threads,
                   "snapshot_every": snapshot_every},
        "submaps": subs,
        "timings": {"total": time.perf_counter() - t0},
    }
    _write_json(out_dir / "diagnostics.json", diag)
    n_kf = sum(s["n_keyframes"] for s in subs)
    n_skip = sum(s["n_skipped"] for s in subs)
    per_kf = sum(s["timings"]["depth_load"] + s["timings"]["scale_alignment"] + s["timings"]["integration"]
                 for s in subs) / max(n_kf - n_skip, 1)
    log.info("%d submap(s), %d keyframes (%d skipped), %.1f ms per keyframe excluding extraction",
             len(subs), n_kf, n_skip, 1e3 * per_kf)
    return 0


# ---------------------------------------------------------------------------
# eval


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def evaluate(manifest, mesh_path, gt_trajectory, gt_depth_dir, est_trajectory=None, gt_depth_scale=1.0,
             stride=2) -> dict:
    """Align the estimated trajectory to GT, then measure ATE and mesh accuracy in the GT frame."""
    m = load_submap(manifest, check_dims=False)
    cam = m.keyframes[0].camera
    if est_trajectory is not None:
        est = Trajectory(read_trajectory_file(est_trajectory))
    else:
        est = Trajectory((kf.id, kf.pose_cam_to_world) for kf in sorted(m.keyframes, key=lambda k: k.id))
    gt_path = Path(gt_trajectory)
    if not gt_path.is_file():
        raise ConfigError(f"{gt_path}: ground-truth trajectory not found")
    gt = Trajectory(read_trajectory_file(gt_path))
    missing = sorted(set(est.ids.tolist()) - set(gt.ids.tolist()))
    if missing:
        raise ConfigError(f"{gt_path}: no ground-truth pose for estimated frame id(s) {missing[:10]}")
    S = umeyama_sim3(est, gt)
    ate = ate_rms(est, gt, S)

    gt_dir = Path(gt_depth_dir)
    if not gt_dir.is_dir():
        raise ConfigError(f"{gt_dir}: ground-truth depth directory not found")
    depths, poses = [], []
    for fid, pose in zip(gt.ids, gt.poses):
        cands = [gt_dir / f"{int(fid):06d}{ext}" for ext in (".raw", ".png")]
        found = [c for c in cands if c.is_file()]
        if not found:
            continue
        depths.append(read_depth(found[0], gt_depth_scale))
        poses.append(pose)
    if not depths:
        raise ConfigError(f"{gt_dir}: no ground-truth depth files named <frame id:06d>.raw/.png")
    cloud = unproject_gt_cloud(depths, poses, cam, stride=stride)

    mesh = load_mesh(mesh_path)
    if mesh.n_vertices == 0:
        raise ConfigError(f"{mesh_path}: mesh has no vertices")
    acc = accuracy(S.apply(mesh.vertices.astype(np.float64)), cloud)
    common = np.intersect1d(est.ids, gt.ids)
    return {
        "manifest": str(manifest), "mesh": str(mesh_path), "n_matched_frames": int(len(common)),
        "ate_rms": ate, "rms_acc": acc.rms_acc, "meda_acc": acc.meda_acc,
        "n_model_points": acc.n_model_points, "n_gt_points": int(len(cloud)), "gt_stride": int(stride),
        "alignment": S.to_dict(),
    }


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    _setup_logging(_pick(args.log_level, cfg, "log_level", "INFO"))
    ev = cfg.get("eval", {})
    manifests = args.manifests or cfg.get("manifests") or []
    if len(manifests) != 1:
        raise ConfigError(f"eval takes exactly one submap manifest, got {len(manifests)}")
    manifest = Path(manifests[0])
    if not manifest.is_file():
        raise ConfigError(f"{manifest}: manifest not found")
    base = manifest.parent
    out = _pick(args.out, cfg, "out")
    if out is None:
        raise ConfigError("no output directory given (--out or 'out' in config)")
    out_dir = Path(out)
    mesh = _pick(args.mesh, ev, "mesh")
    if mesh is None:
        cands = sorted(out_dir.glob("mesh_*.ply"))
        cands = [c for c in cands if ".snapshot" not in c.name]
        if len(cands) != 1:
            raise ConfigError(f"{out_dir}: cannot pick a mesh automatically; pass --mesh")
        mesh = cands[0]
    if not Path(mesh).is_file():
        raise ConfigError(f"{mesh}: mesh not found")
    gt_traj = _pick(args.gt_trajectory, ev, "gt_trajectory")
    gt_traj = gt_traj if gt_traj is not None else base / "gt_trajectory.txt"
    gt_dir = _pick(args.gt_depth_dir, ev, "gt_depth_dir")
    gt_dir = gt_dir if gt_dir is not None else base / "gt_depth"
    stride = int(_pick(args.stride, ev, "stride", 2))
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    est_traj = _pick(args.est_trajectory, ev, "est_trajectory")
    report = evaluate(manifest, mesh, gt_traj, gt_dir, est_traj,
                      float(_pick(args.gt_depth_scale, ev, "gt_depth_scale", 1.0)), stride)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", report)
    log.info("ATE %.6g  RMS acc %.6g  MedA acc %.6g  (%d model points)", report["ate_rms"],
             report["rms_acc"], report["meda_acc"], report["n_model_points"])
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .synthetic import AnalyticScene, make_bundle

    cfg = _load_config(args.config)
    _setup_logging(_pick(args.log_level, cfg, "log_level", "INFO"))
    sy = cfg.get("synth", {})
    out = _pick(args.out, cfg, "out")
    if out is None:
        raise ConfigError("no output directory given (--out or 'out' in config)")
    kind = _pick(args.scene, sy, "scene", "tube")
    radius = float(_pick(args.radius, sy, "radius", 1.0))
    if not radius > 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    if kind == "tube":
        length = float(_pick(args.length, sy, "length", 5.0))
        if not length > 0:
            raise ConfigError(f"length must be positive, got {length}")
        scene = AnalyticScene.tube(radius, length)
    elif kind == "sphere":
        scene = AnalyticScene.sphere(radius)
    elif kind == "plane":
        scene = AnalyticScene.plane()
    else:
        raise ConfigError(f"scene must be tube, sphere or plane, got {kind!r}")
    noise = float(_pick(args.noise, sy, "noise", 0.0))
    make_bundle(
        scene,
        n_keyframes=int(_pick(args.n_keyframes, sy, "n_keyframes", 10)),
        n_points=int(_pick(args.n_points, sy, "n_points", 300)),
        inlier_noise_sigma=noise * radius,
        outlier_fraction=float(_pick(args.outlier_fraction, sy, "outlier_fraction", 0.0)),
        scale_range=(float(_pick(args.scale_min, sy, "scale_min", 0.5)),
                     float(_pick(args.scale_max, sy, "scale_max", 2.0))),
        seed=int(_pick(args.seed, sy, "seed", 0)),
        out_dir=Path(out),
        depth_format=_pick(args.depth_format, sy, "depth_format", "raw"),
    )
    log.info("wrote synthetic %s bundle to %s", kind, out)
    return 0


# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="densemap", description="Densify sparse SLAM submaps with dense depth.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("densify", help="scale-align keyframe depth, fuse into a TSDF and write meshes")
    p.add_argument("manifests", nargs="*", help="submap manifest JSON files")
    _common(p)
    p.add_argument("--threads", type=int, help="worker threads for scale estimation (default 1)")
    p.add_argument("--voxel-size", dest="voxel_size", type=float,
                   help="TSDF voxel edge (default: one pixel footprint at the median depth)")
    p.add_argument("--t", type=float, help="inlier threshold multiplier on sigma (default 2.5)")
    p.add_argument("--seed", type=int, help="seed for proposal subsampling")
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int,
                   help="write a progress mesh every N keyframes")
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("eval", help="Sim(3)-align to ground truth and report ATE and mesh accuracy")
    p.add_argument("manifests", nargs="*", help="the submap manifest the mesh was built from")
    _common(p)
    p.add_argument("--mesh", help="mesh PLY (default: the single mesh_*.ply in --out)")
    p.add_argument("--est-trajectory", dest="est_trajectory",
                   help="estimated trajectory (default: keyframe poses from the manifest)")
    p.add_argument("--gt-trajectory", dest="gt_trajectory",
                   help="ground-truth trajectory (default: gt_trajectory.txt beside the manifest)")
    p.add_argument("--gt-depth-dir", dest="gt_depth_dir",
                   help="ground-truth depth directory (default: gt_depth/ beside the manifest)")
    p.add_argument("--gt-depth-scale", dest="gt_depth_scale", type=float, help="PNG depth divisor")
    p.add_argument("--stride", type=int, help="ground-truth pixel stride (default 2)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic bundle with analytic ground truth")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--scene", choices=["tube", "sphere", "plane"])
    p.add_argument("--radius", type=float)
    p.add_argument("--length", type=float)
    p.add_argument("--n-keyframes", dest="n_keyframes", type=int)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--noise", type=float, help="inlier noise sigma as a fraction of the radius")
    p.add_argument("--outlier-fraction", dest="outlier_fraction", type=float)
    p.add_argument("--scale-min", dest="scale_min", type=float)
    p.add_argument("--scale-max", dest="scale_max", type=float)
    p.add_argument("--depth-format", dest="depth_format", choices=["raw", "png"])
    # accepted for a uniform flag set; ignored by synth
    p.add_argument("--threads", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SubmapError, ScaleEstimationError, ValueError, OSError) as e:
        log.error("%s", e)
        print(f"densemap {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
