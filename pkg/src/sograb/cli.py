"""Command-line entry point: ``sograb {score,align,batch,synth}``.

Exit codes: 0 success, 1 usage or validation error, 2 batch finished with failed trials.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import ICPParams, RigidTransform, apply_transform, axis_angle, icp_align
from .metric import DEFAULT_ALPHA, DCDParams, Partial, Successful, Unsuccessful, dcd, grasp_score
from .pipeline import (PipelineConfig, aggregate, align, export_results, load_manifest,
                       prepare_cloud, run_batch)
from .pointcloud import SegmentationParams, load_cloud, save_cloud
from .synth import GENERATOR, SHAPE_KINDS, DeformSpec, ShapeSpec, write_pair

_CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sig9(x):
    """Round to 9 significant digits for printing; ``None`` passes through."""
    return None if x is None else float(f"{float(x):.9g}")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, separators=(",", ":")), flush=True)


def _segmentation_from_dict(d):
    if d is None or d is False:
        return None
    if d is True:
        return SegmentationParams()
    crop = d.get("crop_box")
    return SegmentationParams(int(d.get("min_brightness", 128)), int(d.get("max_chroma_spread", 30)),
                              None if crop is None else (tuple(crop[0]), tuple(crop[1])))


def build_config(args, fallback=None) -> PipelineConfig:
    """Built-in defaults < ``fallback`` (e.g. manifest alpha) < ``--config`` JSON < explicit flags."""
    values = {"parallel": os.cpu_count() or 1}
    values.update(fallback or {})
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw = json.load(fh)
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    for key in _CONFIG_KEYS - {"segmentation"}:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    seg = values.get("segmentation")
    seg = dict(seg) if isinstance(seg, dict) else ({} if seg else None)
    if getattr(args, "segment", False) and seg is None:
        seg = {}
    if seg is not None:
        for key in ("min_brightness", "max_chroma_spread"):
            if getattr(args, key, None) is not None:
                seg[key] = getattr(args, key)
        if getattr(args, "crop_box", None) is not None:
            c = args.crop_box
            seg["crop_box"] = [c[:3], c[3:]]
    values["segmentation"] = _segmentation_from_dict(seg)
    return PipelineConfig(**values)


def _add_config_flags(p, icp_only=False):
    g = p.add_argument_group("ICP")
    g.add_argument("--max-iterations", dest="max_iterations", type=int)
    g.add_argument("--convergence-tol", dest="convergence_tol", type=float, help="meters")
    g.add_argument("--max-correspondence-dist", dest="max_correspondence_dist", type=float,
                   help="meters (default: 10 x voxel size, or 0.01)")
    if icp_only:
        return
    p.add_argument("--config", help="JSON file with pipeline settings (flags override it)")
    p.add_argument("--alpha", type=float,
                   help=f"DCD sensitivity in 1/m (default {DEFAULT_ALPHA:g})")
    p.add_argument("--voxel-size", dest="voxel_size", type=float, help="downsample voxel edge in meters")
    p.add_argument("--segment", action="store_true", help="keep only bright, unsaturated points")
    p.add_argument("--min-brightness", dest="min_brightness", type=int)
    p.add_argument("--max-chroma-spread", dest="max_chroma_spread", type=int)
    p.add_argument("--crop-box", dest="crop_box", type=float, nargs=6,
                   metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    p.add_argument("--auto-pca-fallback", dest="auto_pca_fallback", action="store_true", default=None,
                   help="re-align with PCA when ICP rmse exceeds --pca-fallback-rmse")
    p.add_argument("--pca-fallback-rmse", dest="pca_fallback_rmse", type=float, help="meters (default 0.005)")


def cmd_score(args) -> int:
    config = build_config(args)
    if args.outcome == "partial":
        if args.t_dropped is None or args.t_cycle is None:
            raise UsageError("--outcome partial requires --t-dropped and --t-cycle")
        outcome = Partial(args.t_dropped, args.t_cycle)
    elif args.outcome == "successful":
        outcome = Successful()
    else:
        outcome = Unsuccessful()
    out = {"dcd": None, "score": 0.0, "alignment_rmse": None, "alpha": sig9(config.alpha),
           "mode": None}
    if not isinstance(outcome, Unsuccessful):
        if not args.pre or not args.grasp:
            raise UsageError("--pre and --grasp are required unless --outcome unsuccessful")
        pre = prepare_cloud(load_cloud(args.pre), config)
        grasp = prepare_cloud(load_cloud(args.grasp), config)
        init = RigidTransform.load(args.init) if args.init else RigidTransform()
        t, rmse, mode = align(pre, grasp, args.mode, init, config)
        d = dcd(apply_transform(pre, t), grasp, DCDParams(config.alpha))
        out.update(dcd=sig9(d), score=sig9(grasp_score(outcome, d)),
                   alignment_rmse=sig9(rmse), mode=mode)
    effective = config.to_dict()
    effective.pop("parallel")
    out["config"] = effective
    _emit(out)
    return 0


def cmd_align(args) -> int:
    params = ICPParams(args.max_iterations or 50, args.convergence_tol or 1e-6,
                       args.max_correspondence_dist or 0.01)
    source, target = load_cloud(args.source), load_cloud(args.target)
    init = RigidTransform.load(args.init) if args.init else RigidTransform()
    res = icp_align(source, target, init, params)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud_path, transform_path = out_dir / "aligned.ply", out_dir / "transform.json"
    save_cloud(apply_transform(source, res.transform), cloud_path)
    res.transform.save(transform_path)
    _emit({"rmse": sig9(res.rmse), "iterations": res.iterations, "converged": res.converged,
           "aligned_cloud": str(cloud_path), "transform": str(transform_path)})
    return 0


def cmd_batch(args) -> int:
    manifest = load_manifest(args.manifest)
    config = build_config(args, None if manifest.alpha is None else {"alpha": manifest.alpha})
    records, errors = run_batch(manifest, config)
    cells = aggregate(records, manifest)
    effective = config.to_dict()
    effective.pop("parallel")
    export_results(records, cells, args.out_dir, errors,
                   metadata={"config": effective, "manifest": os.path.abspath(args.manifest),
                             "version": __version__})
    for e in errors:
        print(f"error: trial {e.trial_id}: {e.message}", file=sys.stderr)
    _emit({"scored": len(records), "failed": len(errors), "cells": len(cells),
           "alpha": sig9(config.alpha), "out_dir": str(args.out_dir)})
    return 2 if errors else 0


def cmd_synth(args) -> int:
    shape = ShapeSpec(args.shape, tuple(args.dims), args.n_points, args.seed)
    rot = axis_angle(args.rotate_axis, np.radians(args.rotate_deg))
    occlusion = None
    if args.occlude_normal is not None:
        occlusion = (tuple(args.occlude_normal), args.occlude_offset)
    spec = DeformSpec(tuple(args.squash_axis), args.squash, RigidTransform(rot, args.translate),
                      occlusion, args.noise, args.seed)
    fmt = "ply-ascii" if args.ascii else "ply-binary-le"
    paths = write_pair(shape, spec, args.out_dir, fmt=fmt)
    _emit({k: str(v) for k, v in paths.items()} | {"generator": GENERATOR})
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sograb", description="Soft-grasp benchmarking from point clouds.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="align one cloud pair and print DCD and grasp score")
    p.add_argument("--pre", help="pre-grasp PLY")
    p.add_argument("--grasp", help="during-grasp PLY")
    p.add_argument("--outcome", required=True, choices=["successful", "partial", "unsuccessful"])
    p.add_argument("--t-dropped", dest="t_dropped", type=float, help="seconds")
    p.add_argument("--t-cycle", dest="t_cycle", type=float, help="seconds")
    p.add_argument("--mode", choices=["icp", "pca"], default="icp")
    p.add_argument("--init", help="JSON transform used to start ICP")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("align", help="ICP-align a source cloud onto a target cloud")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--init", help="JSON transform (default identity)")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    _add_config_flags(p, icp_only=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("batch", help="score every trial of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--parallel", type=int, help="worker processes (default: CPU count)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("synth", help="write a synthetic pre/grasp PLY pair with ground truth")
    p.add_argument("--shape", choices=SHAPE_KINDS, default="box")
    p.add_argument("--dims", type=float, nargs="+", default=[0.055, 0.04, 0.03], help="meters")
    p.add_argument("--n-points", dest="n_points", type=int, default=2000)
    p.add_argument("--squash", type=float, default=1.0)
    p.add_argument("--squash-axis", dest="squash_axis", type=float, nargs=3, default=[1.0, 0.0, 0.0])
    p.add_argument("--rotate-deg", dest="rotate_deg", type=float, default=0.0)
    p.add_argument("--rotate-axis", dest="rotate_axis", type=float, nargs=3, default=[0.0, 0.0, 1.0])
    p.add_argument("--translate", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--occlude-normal", dest="occlude_normal", type=float, nargs=3)
    p.add_argument("--occlude-offset", dest="occlude_offset", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian sigma in meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
