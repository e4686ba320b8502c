"""Command-line entry point: one subcommand per stage plus the one-shot pipeline.

Exit status is 0 on success, 1 on an internal or stage failure and 2 on a
usage or configuration error (including missing input files).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .geom import PointCloud, RigidTransform

log = logging.getLogger("vascutrace")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path, what: str = "file") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", help="TOML experiment config, or a bundled name (p1..p5)")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads within a stage (default: %(default)s)")


def _config(args) -> pipeline.ExperimentConfig:
    if not getattr(args, "config", None):
        raise UsageError("--config is required")
    cfg = pipeline.load_config(args.config)
    return pipeline.override(
        cfg,
        seed=args.seed,
        artifact_rate=getattr(args, "artifact_rate", None),
        pose_noise=getattr(args, "pose_noise", None),
        backend=getattr(args, "backend", None),
        threshold=getattr(args, "threshold", None),
        filter_px=getattr(args, "filter_px", None),
        cutoff_mm=getattr(args, "cutoff", None),
        align_independently=True if getattr(args, "align_independently", False) else None,
        figures=False if getattr(args, "no_figures", False) else None,
        calibration_source="file" if getattr(args, "calibration", None) else None,
        calibration_file=getattr(args, "calibration", None),
    )


def _meta(cfg) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, "name": cfg.name}


# -- stage commands ------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .phantom import build_phantom, surface_cloud

    cfg = _config(args)
    out = Path(args.out)
    spec = build_phantom(cfg.phantom)
    comments = pipeline._comments(cfg)
    io.write_json(out / "phantom.json", {**_meta(cfg), "phantom": spec.to_dict()})
    pipeline._write_centerline(out / "ground_truth_ct.ply", spec.ground_truth, comments)
    io.write_ply(out / "surface_ct.ply", surface_cloud(spec, args.density, RigidTransform.identity("ct")), None, comments)
    print(f"phantom {cfg.name}: {len(spec.ground_truth)} ground-truth points, depth {spec.depths().min():.1f}-{spec.depths().max():.1f} mm")
    return EXIT_OK


def cmd_plan(args) -> int:
    from .phantom import build_phantom
    from .trajectory import plan_path

    out = Path(args.out)
    if args.surface:
        cloud, _ = io.read_ply(_existing(args.surface, "surface cloud"))
        if args.start is None or args.end is None:
            raise UsageError("--surface needs --start and --end")
        path = plan_path(cloud, args.start, args.end, args.spacing, args.band, args.flip_probe_z)
        meta = {}
    else:
        cfg = _config(args)
        cfg = pipeline.override(cfg, spacing=args.spacing, band=args.band)
        spec = build_phantom(cfg.phantom)
        scene = pipeline.build_scene(spec, cfg)
        path = pipeline.plan_scan(spec, scene, cfg)
        meta = _meta(cfg)
    io.write_json(out / "path.json", {**meta, **path.to_dict()})
    print(f"{len(path)} waypoints, path length {path.metadata['path_length']:.2f} mm, plane-fit rms {path.metadata['plane_fit_rms']:.3f} mm")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .phantom import build_phantom, simulate_scan, write_recording

    cfg = _config(args)
    out = Path(args.out)
    spec = build_phantom(cfg.phantom)
    scene = pipeline.build_scene(spec, cfg)
    path = pipeline.plan_scan(spec, scene, cfg)
    rec = simulate_scan(
        spec,
        path,
        scene.true_bundle,
        placement=scene.placement,
        recorded_bundle=scene.estimated,
        pose_noise=cfg.pose_noise,
        seed=cfg.seed,
        jobs=args.jobs,
    )
    rec.metadata.update(_meta(cfg))
    write_recording(rec, out, pipeline._comments(cfg))
    print(f"{len(rec)} frames written to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from . import calib

    out = Path(args.out)
    if out.suffix != ".json":
        out = out / f"{args.kind.replace('-', '_')}.json"
    if args.kind == "us":
        if args.observations:
            obs = [calib.CalibrationObservation.from_dict(d) for d in io.read_jsonl(_existing(args.observations, "observations"))]
        else:
            seed = args.seed if args.seed is not None else 0
            bundle, _ = pipeline.true_scene(seed)
            rng = np.random.default_rng(seed)
            obs = calib.synthetic_us_observations(
                bundle.us_ee, rng.uniform(-50, 50, 3) + [450.0, 0.0, 50.0], args.synthetic, seed=int(rng.integers(2**31)), pixel_noise=args.pixel_noise
            )
            io.write_jsonl(out.with_name(out.stem + "_observations.jsonl"), [o.to_dict() for o in obs])
        res = calib.solve_us_calibration(obs)
    elif args.kind == "eye-to-hand":
        base, _ = io.read_ply(_existing(args.base, "base-frame points"))
        cam, _ = io.read_ply(_existing(args.camera, "camera-frame points"))
        res = calib.solve_eye_to_hand(PointCloud(base.points, "base"), PointCloud(cam.points, "camera"))
    else:
        model, _ = io.read_ply(_existing(args.model, "model cloud"))
        observed, _ = io.read_ply(_existing(args.observed, "observed cloud"))
        res = calib.register_phantom(PointCloud(model.points, "ct"), PointCloud(observed.points, "camera"))
    io.write_json(out, res.to_dict())
    print(f"{args.kind}: rms residual {res.rms_residual:.4g} mm over {res.observation_count} observations -> {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .phantom import read_recording
    from .segnet import ClassicalParams, SegmentParams, segment_video, write_segmentation

    rec = read_recording(_existing(args.recording, "recording directory"))
    params = SegmentParams(ClassicalParams(threshold=args.threshold, method=args.threshold_method), jobs=args.jobs)
    results = segment_video(rec, args.backend, params)
    write_segmentation(results, args.out, _recording_comments(rec))
    print(f"{sum(len(r.detections) for r in results)} detections in {len(results)} frames -> {args.out}")
    return EXIT_OK


def _recording_comments(rec) -> list[str]:
    return [f"{k}={rec.metadata[k]}" for k in ("config_hash", "seed") if k in rec.metadata]


def cmd_reconstruct(args) -> int:
    from .phantom import read_recording
    from .reconstruct import filter_detections, lift_centroids
    from .segnet import read_detections

    rec = read_recording(_existing(args.recording, "recording directory"))
    dets = read_detections(_existing(args.detections, "detections file"))
    bundle = rec.calibration_bundle
    if args.calibration:
        from .phantom import CalibrationBundle

        bundle = CalibrationBundle.from_dict(io.read_json(_existing(args.calibration, "calibration file")))
    width = rec.entries[0].frame.shape[1]
    factor = width / args.mask_size
    kept = filter_detections(dets, width, args.filter_px, factor)
    out = Path(args.out)
    comments = _recording_comments(rec)
    for name, sel in (("unfiltered", dets), ("px_filtered", kept)):
        line = lift_centroids(sel, rec, bundle.us_ee, bundle.mm_per_pixel, factor)
        pipeline._write_centerline(out / f"{name}.ply", line, comments)
    truth = rec.ground_truth.transformed(bundle.ct_to_base().relabel(from_frame=rec.ground_truth.frame))
    pipeline._write_centerline(out / "truth_base.ply", truth, comments)
    print(f"{len(dets)} detections, {len(kept)} within +/-{args.filter_px:g} px -> {out}")
    return EXIT_OK


def _read_centerline(path):
    from .geom import Centerline

    cloud, scalars = io.read_ply(_existing(path, "centerline"))
    fi = scalars.get("frame_index")
    return Centerline(cloud.points, None if fi is None else fi.astype(int), scalars.get("area_mm2"), cloud.frame)


def cmd_evaluate(args) -> int:
    from .reconstruct import evaluate_variants

    recon = _read_centerline(args.centerline)
    truth = _read_centerline(args.truth)
    unf = _read_centerline(args.unfiltered) if args.unfiltered else None
    ev = evaluate_variants(recon, truth, args.cutoff, args.align_independently, unfiltered=unf)
    out = Path(args.out)
    for name, rep in (("unfiltered", ev.unfiltered), ("filtered", ev.filtered)):
        rep.write_json(out / f"{name}.json")
        rep.write_csv(out / f"{name}_errors.csv")
    io.write_transform(out / "alignment.json", ev.transform)
    for r in ev.rows():
        print(f"{r['variant']:>10}: mean {r['mean_l2']:.3f} mm, std {r['std_l2']:.3f} mm, Hausdorff {r['hausdorff']:.3f} mm, {r['point_count']} points")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    names = list(args.config or [])
    if args.bundled:
        names += list(pipeline.BUNDLED)
    if not names:
        raise UsageError("give --config (repeatable) or --bundled")
    cfgs = []
    for n in names:
        args.config = n
        cfgs.append(_config(args))
    if len(cfgs) == 1:
        res = pipeline.run_pipeline(cfgs[0], args.out, args.jobs)
        summaries = [res.summary]
    else:
        _, summary = pipeline.run_many(cfgs, args.out, args.jobs)
        summaries = summary["runs"]
    print(f"{'phantom':<10}{'variant':<12}{'mean':>8}{'std':>8}{'Hausdorff':>11}{'points':>8}")
    for s in summaries:
        for v in ("unfiltered", "filtered"):
            r = s[v]
            print(f"{s['name']:<10}{v:<12}{r['mean_l2']:>8.3f}{r['std_l2']:>8.3f}{r['hausdorff']:>11.3f}{r['point_count']:>8d}")
    print(f"summary: {Path(args.out) / 'summary.json'}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vascutrace", description="Robotic-ultrasound artery centerline reconstruction on synthetic phantoms.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", help="build a phantom and write its ground truth")
    _common(p)
    p.add_argument("--density", type=float, default=1.0, help="surface points per mm^2")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("plan", help="plan probe waypoints over the skin surface")
    _common(p)
    p.add_argument("--surface", help="surface PLY (base frame); plans without a config")
    p.add_argument("--start", type=float, nargs=3)
    p.add_argument("--end", type=float, nargs=3)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--band", type=float, default=2.0)
    p.add_argument("--flip-probe-z", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a tracked ultrasound sweep")
    _common(p)
    p.add_argument("--pose-noise", type=float)
    p.add_argument("--artifact-rate", type=float)
    p.add_argument("--calibration", help="calibration bundle JSON used instead of synthetic calibration")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="US image, eye-to-hand or phantom registration")
    csub = p.add_subparsers(dest="kind", required=True, metavar="KIND")
    c = csub.add_parser("us", help="image -> end-effector from fixed-point observations")
    _common(c, config=False)
    c.add_argument("--observations", help="JSONL of observations (robot_pose, pixel, mm_per_pixel)")
    c.add_argument("--synthetic", type=int, default=50, help="number of synthetic poses when no observations are given")
    c.add_argument("--pixel-noise", type=float, default=0.5)
    c.set_defaults(func=cmd_calibrate)
    c = csub.add_parser("eye-to-hand", help="camera -> robot base from corresponded points")
    _common(c, config=False)
    c.add_argument("--base", required=True, help="PLY of points in the robot-base frame")
    c.add_argument("--camera", required=True, help="PLY of the same points seen by the camera")
    c.set_defaults(func=cmd_calibrate)
    c = csub.add_parser("register", help="camera observation -> CT model")
    _common(c, config=False)
    c.add_argument("--model", required=True, help="CT-frame model surface PLY")
    c.add_argument("--observed", required=True, help="camera-frame observed surface PLY")
    c.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("segment", help="segment every frame of a recording")
    _common(p, config=False)
    p.add_argument("--recording", required=True)
    p.add_argument("--backend", choices=("classical", "attention-ref"), default="classical")
    p.add_argument("--threshold", type=float, help="fixed intensity threshold (default: automatic)")
    p.add_argument("--threshold-method", choices=("isodata", "otsu"), default="isodata")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("reconstruct", help="filter and lift detections to a 3-D centerline")
    _common(p, config=False)
    p.add_argument("--recording", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--calibration", help="bundle JSON overriding the recording's calibration")
    p.add_argument("--filter-px", type=float, default=85.0)
    p.add_argument("--mask-size", type=int, default=256)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="align to ground truth and score")
    _common(p, config=False)
    p.add_argument("--centerline", required=True, help="reconstructed centerline PLY to filter and align")
    p.add_argument("--truth", required=True, help="ground-truth centerline PLY in the same frame")
    p.add_argument("--unfiltered", help="centerline scored as the unfiltered variant (default: --centerline)")
    p.add_argument("--cutoff", type=float, default=5.0, help="truth-distance cutoff in mm")
    p.add_argument("--align-independently", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p, config=False)
    p.add_argument("--config", action="append", help="TOML config or bundled name; repeatable")
    p.add_argument("--bundled", action="store_true", help="run all five bundled phantoms")
    p.add_argument("--artifact-rate", type=float)
    p.add_argument("--pose-noise", type=float)
    p.add_argument("--backend", choices=("classical", "attention-ref"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--filter-px", type=float)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--align-independently", action="store_true")
    p.add_argument("--calibration", help="calibration bundle JSON used instead of synthetic calibration")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) is not None and args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (UsageError, pipeline.ConfigError) as exc:
        print(f"vascutrace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"vascutrace: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        if args.verbose:
            log.exception("stage failure")
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        print(f"vascutrace: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
