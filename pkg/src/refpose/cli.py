"""Command-line entry point.

Records go to ``--out`` (JSON or JSON-lines) or to stdout; a short human
summary goes to stderr. Exit codes: 0 success, 2 input error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config
from .errors import InvalidInputError, NumericalFailure
from .geometry import CameraIntrinsics, RigidTransform
from .losses import total_depth_loss
from .matching import MatchSet, builtin_features, match_images
from .metrics import PoseErrorReport, depth_metrics, pose_errors, pose_recalls
from .pipeline import _match_cfg, solve_pair
from .pose import Correspondence3D, lift_matches, query_object_pose, robust_register
from .synth import View, write_suite

log = logging.getLogger("refpose")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _summary(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(records, out, key="pair_id"):
    if out:
        io.write_jsonl(out, records, key)
    else:
        for r in sorted(records, key=lambda r: str(r.get(key, ""))):
            print(io.dumps(r))


def _camera(spec, shape, im_id=None) -> CameraIntrinsics:
    """Intrinsics from ``fx,fy,cx,cy`` or a JSON file holding ``cam_K`` (optionally keyed by image id)."""
    h, w = shape[:2]
    if spec is None:
        raise InvalidInputError("camera intrinsics are required")
    if "," in spec and not Path(spec).exists():
        try:
            fx, fy, cx, cy = (float(x) for x in spec.split(","))
        except ValueError as exc:
            raise InvalidInputError(f"bad intrinsics {spec!r}; expected fx,fy,cx,cy") from exc
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
    data = io._read_json(spec)
    if "cam_K" not in data:
        key = str(im_id) if im_id is not None else sorted(data, key=int)[0]
        if key not in data:
            raise InvalidInputError(f"{spec}: no entry for image {key}")
        data = data[key]
    return CameraIntrinsics.from_matrix(data["cam_K"], w, h)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.registration = replace(cfg.registration, seed=args.seed)
        cfg.synth = replace(cfg.synth, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_eval_depth(args) -> int:
    cfg = _config(args)
    scale = args.scale or cfg.depth.scale
    pred = io.load_depth_png(args.pred, scale, cfg.depth.d_min, cfg.depth.d_max)
    gt = io.load_depth_png(args.gt, scale, cfg.depth.d_min, cfg.depth.d_max)
    mask = io.load_mask(args.mask) & (gt > 0) if args.mask else None
    table = depth_metrics(pred, gt, mask, tuple(args.deltas))
    rec = {"pair_id": args.pair_id or Path(args.pred).stem, "metric": "depth", **table}
    _emit([rec], args.out)
    _summary(f"abs_rel={table['abs_rel']:.6g} rmse={table['rmse']:.6g} over {table['count']} pixels")
    return EXIT_OK


def cmd_losses(args) -> int:
    cfg = _config(args)
    scale = args.scale or cfg.depth.scale
    pred = io.load_depth_png(args.pred, scale, cfg.depth.d_min, cfg.depth.d_max)
    gt = io.load_depth_png(args.gt, scale, cfg.depth.d_min, cfg.depth.d_max)
    image = io.load_gray(args.image) if args.image else np.zeros_like(gt)
    mask = io.load_mask(args.mask) if args.mask else None
    k = _camera(args.camera, gt.shape, args.im_id)
    report = total_depth_loss(pred, gt, image, k, mask, cfg.losses)
    _emit([{"pair_id": args.pair_id or Path(args.pred).stem, "metric": "losses", **report.to_dict()}], args.out)
    _summary(f"total loss {report.total:.6g} over {report.m} pixels")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _config(args)
    scale = args.scale or cfg.depth.scale
    if args.features:
        provider = io.import_provider(args.features)
        img_q, img_r, dq, dr = args.query, args.ref, None, None
    else:
        provider = builtin_features
        img_q, img_r = io.load_gray(args.query), io.load_gray(args.ref)
        dq = io.load_depth_png(args.depth_q, scale) if args.depth_q else None
        dr = io.load_depth_png(args.depth_r, scale) if args.depth_r else None
    matches = match_images(img_q, img_r, dq, dr, _match_cfg(cfg), provider)
    rec = {"pair_id": args.pair_id or Path(args.query).stem, **matches.to_dict()}
    if args.out:
        io.dump_json(args.out, rec)
    else:
        print(io.dumps(rec))
    _summary(f"{len(matches)} fine matches ({matches.stats})")
    return EXIT_OK


def cmd_solve_pose(args) -> int:
    cfg = _config(args)
    scale = args.scale or cfg.depth.scale
    if args.corr:
        corr = Correspondence3D.from_dict(io._read_json(args.corr))
    else:
        if not (args.matches and args.depth_q and args.depth_r):
            raise InvalidInputError("solve-pose needs --corr, or --matches with --depth-q and --depth-r")
        matches = MatchSet.from_dict(io._read_json(args.matches))
        dq = io.load_depth_png(args.depth_q, scale)
        dr = io.load_depth_png(args.depth_r, scale)
        kq = _camera(args.camera_q, dq.shape, args.im_id)
        kr = _camera(args.camera_r or args.camera_q, dr.shape, args.im_id)
        mq = io.load_mask(args.mask_q) if args.mask_q else None
        mr = io.load_mask(args.mask_r) if args.mask_r else None
        corr = lift_matches(matches, dq, dr, kq, kr, mq, mr)
    reg = cfg.registration
    est = robust_register(corr, reg.inlier_threshold, reg.max_iters, reg.seed)
    rec = {"pair_id": args.pair_id or "pair", "estimate": est.to_dict()}
    if args.ref_pose:
        t_r = RigidTransform.from_dict(io._read_json(args.ref_pose))
        rec["pose"] = query_object_pose(t_r, est.transform).to_dict()
    if args.out:
        io.dump_json(args.out, rec)
    else:
        print(io.dumps(rec))
    _summary(f"{est.n_inliers}/{len(corr)} inliers, rms {est.rms:.3g} m ({est.method})")
    return EXIT_OK


def _load_pairs(scene_dir):
    root = Path(scene_dir)
    index = io.read_jsonl(root / "pairs.jsonl")
    if not index:
        raise InvalidInputError(f"{root}: empty pair index")
    return root, index


def _load_view(root, name, im_id) -> View:
    rec = io.load_scene(root / name, im_id)[0]
    return View(rec.image(), rec.depth(), rec.mask(0), rec.intrinsics, rec.objects[0].pose)


def _solve_entry(task):
    root, entry, cfg = task
    q = _load_view(root, "query", entry["im_id"])
    r = _load_view(root, "reference", entry["im_id"])
    return solve_pair(entry["pair_id"], q, r, cfg).to_dict()


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    root, index = _load_pairs(args.scene)
    tasks = [(root, e, cfg) for e in index]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(_solve_entry, tasks))
    else:
        records = [_solve_entry(t) for t in tasks]
    _emit(records, args.out)
    ok = sum(r["pose"] is not None for r in records)
    _summary(f"solved {ok}/{len(records)} pairs")
    return EXIT_OK


def _eval_entry(task):
    root, entry, est, cfg, symmetric = task
    rec = io.load_scene(root / "query", entry["im_id"])[0]
    mesh = io.load_mesh_ply(root / "models" / f"obj_{entry['obj_id']:06d}.ply")
    pose = None if est is None or est.get("pose") is None else RigidTransform.from_dict(est["pose"])
    return pose_errors(entry["pair_id"], pose, rec.objects[0].pose, mesh, rec.intrinsics,
                       cfg.metrics, symmetric).to_dict()


def cmd_eval_pose(args) -> int:
    cfg = _config(args)
    root, index = _load_pairs(args.scene)
    estimates = {str(r["pair_id"]): r for r in io.read_jsonl(args.estimates)}
    tasks = [(root, e, estimates.get(str(e["pair_id"])), cfg, args.symmetric) for e in index]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_eval_entry, tasks))
    else:
        reports = [_eval_entry(t) for t in tasks]
    width = io.load_scene(root / "query", index[0]["im_id"])[0].intrinsics.width
    table = pose_recalls([PoseErrorReport.from_dict(r) for r in reports], cfg.metrics, width)
    records = [dict(r, metric="pose") for r in reports]
    records.append({"pair_id": "~summary", "metric": "recall", "vsd_variant": cfg.metrics.vsd_variant,
                    **table.to_dict()})
    _emit(records, args.out)
    _summary(f"AR {table.ar:.2f} (VSD {table.vsd:.2f}, MSSD {table.mssd:.2f}, MSPD {table.mspd:.2f}), "
             f"ADD(S)-0.1d {table.add_01d:.2f} over {table.count} pairs")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    s = cfg.synth
    updates = {}
    if args.n_pairs is not None:
        updates["n_pairs"] = args.n_pairs
    if args.gap_deg is not None:
        updates["gap_deg"] = (0.0, args.gap_deg[0], 0.0) if len(args.gap_deg) == 1 else tuple(args.gap_deg)
    if args.noise_std is not None:
        updates["noise_std"] = args.noise_std
    if args.outlier_fraction is not None:
        updates["outlier_fraction"] = args.outlier_fraction
    s = replace(s, **updates)
    index = write_suite(args.out, s)
    _summary(f"wrote {len(index)} pairs to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override registration/synthesis seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--pair-id", help="identifier stored in output records")

    p = argparse.ArgumentParser(prog="refpose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval-depth", parents=[common], help="depth metric table for a prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scale", type=float, help="stored value per metre (default 1000)")
    e.add_argument("--mask")
    e.add_argument("--deltas", type=float, nargs="+", default=[1.05, 1.10, 1.25])
    e.set_defaults(func=cmd_eval_depth)

    lo = sub.add_parser("losses", parents=[common], help="composite depth loss report")
    lo.add_argument("--pred", required=True)
    lo.add_argument("--gt", required=True)
    lo.add_argument("--image", help="grayscale/RGB image for the edge term")
    lo.add_argument("--camera", required=True, help="fx,fy,cx,cy or JSON with cam_K")
    lo.add_argument("--im-id", type=int)
    lo.add_argument("--mask")
    lo.add_argument("--scale", type=float)
    lo.set_defaults(func=cmd_losses)

    m = sub.add_parser("match", parents=[common], help="coarse-to-fine matches between two images")
    m.add_argument("--query", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--depth-q")
    m.add_argument("--depth-r")
    m.add_argument("--scale", type=float)
    m.add_argument("--features", help="directory of .feat files (import provider)")
    m.set_defaults(func=cmd_match)

    s = sub.add_parser("solve-pose", parents=[common], help="relative pose from matches or 3D pairs")
    s.add_argument("--matches")
    s.add_argument("--corr", help="JSON with src/dst point lists")
    s.add_argument("--depth-q")
    s.add_argument("--depth-r")
    s.add_argument("--camera-q")
    s.add_argument("--camera-r")
    s.add_argument("--im-id", type=int)
    s.add_argument("--mask-q")
    s.add_argument("--mask-r")
    s.add_argument("--ref-pose", help="JSON {R, t}: object pose in the reference camera")
    s.add_argument("--scale", type=float)
    s.set_defaults(func=cmd_solve_pose)

    pl = sub.add_parser("pipeline", parents=[common], help="estimate poses for every pair of a scene directory")
    pl.add_argument("--scene", required=True)
    pl.set_defaults(func=cmd_pipeline)

    ev = sub.add_parser("eval-pose", parents=[common], help="pose errors and recalls")
    ev.add_argument("--scene", required=True)
    ev.add_argument("--estimates", required=True, help="JSON-lines with pair_id and pose {R, t}")
    ev.add_argument("--symmetric", action="store_true", help="report ADD-S instead of ADD")
    ev.set_defaults(func=cmd_eval_pose)

    sy = sub.add_parser("synth", parents=[common], help="write a synthetic query/reference suite")
    sy.add_argument("--n-pairs", type=int)
    sy.add_argument("--gap-deg", type=float, nargs="+", help="y-axis gap, or x y z gaps")
    sy.add_argument("--noise-std", type=float)
    sy.add_argument("--outlier-fraction", type=float)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    level = os.environ.get("REFPOSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "synth" and not args.out:
        _summary("error: synth requires --out DIR")
        return EXIT_INPUT
    try:
        return args.func(args)
    except InvalidInputError as exc:
        _summary(f"error: {exc}")
        return EXIT_INPUT
    except NumericalFailure as exc:
        _summary(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        _summary(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
