"""Command-line front end.

Exit codes: 0 success, 2 usage or input error, 1 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .dataset_io import compute_statistics, read_dataset, write_dataset
from .errors import ParseError
from .geometry import read_poses, write_poses
from .gradcheck import run_suite
from .matching import CMU_MAX_CAM_DIST, ROBOTCAR_MAX_CAM_DIST, generate_correspondences
from .patch_inference import (
    CENTER_SIZE, W_FLOOR, TilePlan, fuse_patch_scores, make_weight_map, read_patch_scores,
    write_score_map,
)
from .pointcloud import (
    FusionConfig, annotate_visibility, fuse_depth_maps, read_cloud, read_depth_map,
    write_cloud, write_depth_map,
)
from .synth import (
    SceneConfig, dump_metadata, evaluate_correspondences, generate_scene,
    ground_truth_correspondences, scene_from_metadata,
)

log = logging.getLogger("xseason")

PROFILES = {
    "cmu-like": {"max_cam_dist": CMU_MAX_CAM_DIST, "recompute_visibility": False},
    "robotcar-like": {"max_cam_dist": ROBOTCAR_MAX_CAM_DIST, "recompute_visibility": True},
}
PIPELINE_DEFAULTS = {
    "profile": "cmu-like",
    "kappa": 0.01,
    "min_common": 500,
    "max_cam_dist": None,
    "threads": None,
    "vis_tol": 0.02,
    "condition": None,
    "pixel_stride": 4,
    "merge_radius": 0.05,
    "min_views": 1,
}
_CASTS = {"kappa": float, "min_common": int, "max_cam_dist": float, "threads": int,
          "vis_tol": float, "pixel_stride": int, "merge_radius": float, "min_views": int}


class UsageError(Exception):
    pass


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", lineno, str(path))
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in PIPELINE_DEFAULTS:
                raise ParseError(f"unknown key {key!r}", lineno, str(path))
            out[key] = value
    return out


def resolve_config(args) -> dict:
    """Profile defaults < config file < command-line flags."""
    cfg = dict(PIPELINE_DEFAULTS)
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    profile = getattr(args, "profile", None) or file_cfg.get("profile") or cfg["profile"]
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    cfg.update(PROFILES[profile])
    cfg["profile"] = profile
    for key, value in file_cfg.items():
        if key == "profile":
            continue
        try:
            cfg[key] = _CASTS[key](value) if key in _CASTS else value
        except ValueError:
            raise UsageError(f"config value for {key} is invalid: {value!r}") from None
    for key in PIPELINE_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None and key != "profile":
            cfg[key] = flag
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    for key in ("kappa", "max_cam_dist", "vis_tol"):
        if not cfg[key] > 0:
            raise UsageError(f"{key} must be positive")
    if cfg["merge_radius"] < 0:
        raise UsageError("merge_radius must be >= 0")
    for key in ("min_common", "threads", "pixel_stride", "min_views"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    return cfg


def _add_pipeline_flags(p, fusion=False, matching=False):
    p.add_argument("--config", help="key = value file; flags take precedence")
    if fusion:
        p.add_argument("--pixel-stride", dest="pixel_stride", type=int)
        p.add_argument("--merge-radius", dest="merge_radius", type=float)
        p.add_argument("--min-views", dest="min_views", type=int)
    if matching:
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--kappa", type=float)
        p.add_argument("--min-common", dest="min_common", type=int)
        p.add_argument("--max-cam-dist", dest="max_cam_dist", type=float)
        p.add_argument("--threads", type=int)
        p.add_argument("--vis-tol", dest="vis_tol", type=float)
        p.add_argument("--condition", help="condition tag (default: target traversal id)")


def _traversal_views(views, traversal: str):
    return [v for v in views if v.traversal_id == traversal]


# -- commands ---------------------------------------------------------------------

def cmd_fuse(args) -> int:
    cfg = resolve_config(args)
    views = read_poses(args.poses)
    depth_dir = Path(args.depth_dir)
    if not depth_dir.is_dir():
        raise FileNotFoundError(f"depth directory not found: {depth_dir}")
    dmaps = [read_depth_map(p) for p in sorted(depth_dir.glob("*.depth"))]
    if not dmaps:
        raise UsageError(f"no .depth files in {depth_dir}")
    by_id = {v.view_id: v for v in views}
    missing = [d.view_id for d in dmaps if d.view_id not in by_id]
    if missing:
        raise UsageError(f"depth maps for views absent from the poses file: {missing[:5]}")
    travs = sorted({by_id[d.view_id].traversal_id for d in dmaps})
    traversal = args.traversal
    if traversal is None:
        if len(travs) > 1:
            raise UsageError(f"depth maps span traversals {travs}; pass --traversal")
        traversal = travs[0]
    dmaps = [d for d in dmaps if by_id[d.view_id].traversal_id == traversal]
    if not dmaps:
        raise UsageError(f"no depth maps for traversal {traversal!r}")
    fcfg = FusionConfig(cfg["pixel_stride"], cfg["merge_radius"], cfg["min_views"])
    cloud = fuse_depth_maps([by_id[d.view_id] for d in dmaps], dmaps, fcfg)
    write_cloud(cloud, args.out)
    log.info("fused %d depth maps into %d points", len(dmaps), len(cloud))
    return 0


def cmd_visibility(args) -> int:
    views = read_poses(args.poses)
    cloud = read_cloud(args.cloud, args.traversal)
    tv = _traversal_views(views, cloud.traversal_id)
    if not tv:
        raise UsageError(f"no views of traversal {cloud.traversal_id!r} in {args.poses}")
    out = annotate_visibility(cloud, tv, args.vis_tol)
    write_cloud(out, args.out)
    return 0


def cmd_match(args) -> int:
    cfg = resolve_config(args)
    views = read_poses(args.poses)
    ref = read_cloud(args.ref_cloud, args.ref_traversal)
    tgt = read_cloud(args.target_cloud, args.target_traversal)
    if len(ref) == 0 or len(tgt) == 0:
        raise UsageError("both clouds must be nonempty")
    if cfg["recompute_visibility"]:
        ref = annotate_visibility(ref, _traversal_views(views, ref.traversal_id), cfg["vis_tol"])
        tgt = annotate_visibility(tgt, _traversal_views(views, tgt.traversal_id), cfg["vis_tol"])
    condition = cfg["condition"] if cfg["condition"] is not None else tgt.traversal_id
    samples = generate_correspondences(
        ref, tgt, views, kappa=cfg["kappa"], min_common=cfg["min_common"],
        max_cam_dist=cfg["max_cam_dist"], condition_tag=condition, threads=cfg["threads"])
    manifest = write_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), manifest)
    return 0


def cmd_stats(args) -> int:
    stats = compute_statistics(read_dataset(args.manifest))
    sys.stdout.write(stats.to_tsv())
    return 0


def cmd_losscheck(args) -> int:
    ok = True
    for res in run_suite(seed=args.seed, reps=args.reps):
        passed = res.passed(args.tol)
        ok &= passed
        print(f"{res.kernel}\tinstances={res.instances}\tmax_rel_error={res.max_rel_error:.3e}\t"
              f"{'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    kw = {}
    for name in ("sigma", "dropout", "stops", "sample_spacing"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if args.traversals is not None:
        kw["n_traversals"] = args.traversals
    scene = generate_scene(SceneConfig(**kw), args.seed, render=not args.no_depth)
    out = Path(args.out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    write_poses(scene.views, out / "poses.txt")
    for tid, cloud in scene.clouds.items():
        write_cloud(cloud, out / "clouds" / f"{tid}.ply")
    if scene.depth_maps:
        (out / "depth").mkdir(exist_ok=True)
        for vid, dm in scene.depth_maps.items():
            write_depth_map(dm, out / "depth" / f"{vid}.depth")
    gt = ground_truth_correspondences(scene, max_cam_dist=args.max_cam_dist)
    write_dataset(gt, out / "gt")
    (out / "scene.json").write_text(dump_metadata(scene), encoding="utf-8")
    log.info("scene with %d samples, %d views written to %s",
             len(scene.sample_class), len(scene.views), out)
    return 0


def cmd_eval(args) -> int:
    meta = json.loads(Path(args.scene).read_text(encoding="utf-8"))
    scene = scene_from_metadata(meta)
    samples = read_dataset(args.manifest, scene.views_by_id)
    res = evaluate_correspondences(samples, scene, args.pixel_tol)
    print(f"precision\t{res.precision:.6f}")
    print(f"recall\t{res.recall:.6f}")
    print(f"emitted\t{res.n_emitted}")
    print(f"correct\t{res.n_correct}")
    print(f"ground_truth\t{res.n_ground_truth}")
    if not res.precision_defined:
        print("precision_defined\tfalse")
    return 0


def cmd_fuse_scores(args) -> int:
    patches = [read_patch_scores(p) for p in args.scores]
    if not patches:
        raise UsageError("no score files")
    sizes = {s.shape[0] for _, s in patches}
    depths = {s.shape[2] for _, s in patches}
    if len(sizes) != 1 or len(depths) != 1:
        raise UsageError("score files disagree on patch size or channel count")
    p = sizes.pop()
    origins = tuple(o for o, _ in patches)
    plan = TilePlan(args.width, args.height, p, 0, origins)
    center = args.center_size if args.center_size is not None else min(CENTER_SIZE, p)
    wm = make_weight_map(p, center, args.w_floor)
    fused = fuse_patch_scores(plan, wm, [s for _, s in patches])
    write_score_map(args.out, fused)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xseason", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse depth maps into a point cloud")
    p.add_argument("--poses", required=True)
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--traversal")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, fusion=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("visibility", help="annotate a cloud with z-buffer visibility")
    p.add_argument("--cloud", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--traversal", help="traversal id (default: cloud file stem)")
    p.add_argument("--vis-tol", dest="vis_tol", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visibility)

    p = sub.add_parser("match", help="generate correspondences between two clouds")
    p.add_argument("--ref-cloud", required=True)
    p.add_argument("--target-cloud", required=True)
    p.add_argument("--ref-traversal")
    p.add_argument("--target-traversal")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, matching=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("stats", help="per-condition pair counts and mean N")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("losscheck", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=12)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("synth", help="write a synthetic multi-traversal scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--traversals", type=int)
    p.add_argument("--stops", type=int)
    p.add_argument("--sample-spacing", dest="sample_spacing", type=float)
    p.add_argument("--max-cam-dist", dest="max_cam_dist", type=float, default=CMU_MAX_CAM_DIST,
                   help="camera distance bound for the ground-truth pairs")
    p.add_argument("--no-depth", action="store_true", help="skip depth-map rendering")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score correspondences against a synthetic scene")
    p.add_argument("--scene", required=True, help="scene.json written by synth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pixel-tol", dest="pixel_tol", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse-scores", help="blend per-patch score files into a full image")
    p.add_argument("scores", nargs="+")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--center-size", dest="center_size", type=int)
    p.add_argument("--w-floor", dest="w_floor", type=float, default=W_FLOOR)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse_scores)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ParseError, ValueError, OSError) as exc:
        print(f"xseason {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"xseason {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
