"""Experiment configuration and the end-to-end phantom -> evaluation run.

A run builds a phantom, invents a physical scene around it (where the
phantom, camera and probe really are), estimates the calibration chain from
noisy synthetic measurements, plans and simulates a scan with the true
scene, then reconstructs through the *estimated* chain and scores the result.
"""

from __future__ import annotations

import contextlib
import csv
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .calib import (
    checkerboard_points,
    register_phantom,
    solve_eye_to_hand,
    solve_us_calibration,
    synthetic_us_observations,
)
from .geom import PointCloud, RigidTransform, rotation_about, rotation_angle
from .phantom import (
    DEFAULT_DEPTH_SETTING,
    DEFAULT_FRAME_SHAPE,
    DEFAULT_MM_PER_PIXEL,
    CalibrationBundle,
    PhantomConfig,
    build_phantom,
    image_to_probe,
    rasterize,
    simulate_scan,
    surface_cloud,
    write_recording,
)
from .reconstruct import (
    DEFAULT_CUTOFF_MM,
    DEFAULT_FILTER_PX,
    evaluate_variants,
    filter_detections,
    lift_centroids,
    native_coordinate,
)
from .segnet import ClassicalParams, SegmentParams, dice_iou, segment_video, write_segmentation
from .trajectory import plan_path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUNDLED = ("p1", "p2", "p3", "p4", "p5")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass(frozen=True)
class CalibrationConfig:
    source: str = "synthetic"  # or "file"
    file: str | None = None
    us_poses: int = 50
    pixel_noise: float = 0.5
    board_noise: float = 0.2
    surface_noise: float = 0.1
    surface_density: float = 0.25


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a pipeline run depends on.

    ``start``/``end`` are path end points in phantom (CT) coordinates; when
    omitted the path runs from the trunk's first control point to the
    midpoint of the two branch ends.
    """

    name: str
    phantom: PhantomConfig
    seed: int = 7
    start: tuple | None = None
    end: tuple | None = None
    spacing: float = 1.0
    band: float = 2.0
    calibration: CalibrationConfig = CalibrationConfig()
    pose_noise: float = 0.1
    backend: str = "classical"
    threshold: float | None = None
    threshold_method: str = "isodata"
    stub_seed: int = 0
    filter_px: float = DEFAULT_FILTER_PX
    cutoff_mm: float = DEFAULT_CUTOFF_MM
    align_independently: bool = False
    figures: bool = True
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        """Canonical content used for the config hash (paths and figure flags excluded)."""
        cal = dict(self.calibration.__dict__)
        return {
            "name": self.name,
            "phantom": self.phantom.to_dict(),
            "seed": self.seed,
            "path": {
                "start": None if self.start is None else list(self.start),
                "end": None if self.end is None else list(self.end),
                "spacing": self.spacing,
                "band": self.band,
            },
            "calibration": cal,
            "simulate": {"pose_noise": self.pose_noise},
            "segment": {
                "backend": self.backend,
                "threshold": self.threshold,
                "threshold_method": self.threshold_method,
                "stub_seed": self.stub_seed,
            },
            "reconstruct": {
                "filter_px": self.filter_px,
                "cutoff_mm": self.cutoff_mm,
                "align_independently": self.align_independently,
            },
        }

    @property
    def hash(self) -> str:
        return io.config_hash(self.to_dict())


_TOP_KEYS = {"name", "seed", "phantom", "path", "calibration", "simulate", "segment", "reconstruct", "report"}


def _vec3(v, key):
    if v is None:
        return None
    if len(v) != 3:
        raise ConfigError(f"{key} must be a 3-vector")
    return tuple(float(x) for x in v)


def config_from_dict(d: dict, base_dir: Path | None = None, source: str | None = None) -> ExperimentConfig:
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "phantom" not in d:
        raise ConfigError("config has no [phantom] table")
    try:
        phantom = PhantomConfig.from_dict(d["phantom"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad [phantom] table: {exc}") from exc
    path = d.get("path", {})
    cal = dict(d.get("calibration", {}))
    if cal.get("file") is not None:
        p = Path(cal["file"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        cal["file"] = str(p)
    try:
        calibration = CalibrationConfig(**cal)
    except TypeError as exc:
        raise ConfigError(f"bad [calibration] table: {exc}") from exc
    if calibration.source not in ("synthetic", "file"):
        raise ConfigError(f"calibration.source must be 'synthetic' or 'file', got {calibration.source!r}")
    if calibration.source == "file":
        if not calibration.file:
            raise ConfigError("calibration.source = 'file' needs calibration.file")
        if not Path(calibration.file).is_file():
            raise ConfigError(f"calibration file not found: {calibration.file}")
    seg = d.get("segment", {})
    rec = d.get("reconstruct", {})
    sim = d.get("simulate", {})
    rep = d.get("report", {})
    try:
        cfg = ExperimentConfig(
            name=str(d.get("name", "experiment")),
            phantom=phantom,
            seed=int(d.get("seed", 7)),
            start=_vec3(path.get("start"), "path.start"),
            end=_vec3(path.get("end"), "path.end"),
            spacing=float(path.get("spacing", 1.0)),
            band=float(path.get("band", 2.0)),
            calibration=calibration,
            pose_noise=float(sim.get("pose_noise", 0.1)),
            backend=str(seg.get("backend", "classical")),
            threshold=None if seg.get("threshold") is None else float(seg["threshold"]),
            threshold_method=str(seg.get("threshold_method", "isodata")),
            stub_seed=int(seg.get("stub_seed", 0)),
            filter_px=float(rec.get("filter_px", DEFAULT_FILTER_PX)),
            cutoff_mm=float(rec.get("cutoff_mm", DEFAULT_CUTOFF_MM)),
            align_independently=bool(rec.get("align_independently", False)),
            figures=bool(rep.get("figures", True)),
            source=source,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.backend not in ("classical", "attention-ref"):
        raise ConfigError(f"segment.backend must be 'classical' or 'attention-ref', got {cfg.backend!r}")
    if cfg.threshold_method not in ("isodata", "otsu"):
        raise ConfigError(f"segment.threshold_method must be 'isodata' or 'otsu', got {cfg.threshold_method!r}")
    for key in ("spacing", "band", "filter_px", "cutoff_mm"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be positive")
    if cfg.pose_noise < 0:
        raise ConfigError("simulate.pose_noise must be non-negative")
    return cfg


def bundled_config_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("vascutrace") / "configs" / f"{name}.toml"))


def load_config(path_or_name) -> ExperimentConfig:
    """Read a TOML experiment config; a bare bundled name such as ``"p3"`` also works."""
    s = str(path_or_name)
    path = bundled_config_path(s) if s in BUNDLED else Path(s)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent, str(path))


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Apply command-line overrides (``None`` values are ignored)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    cal = {k[len("calibration_"):]: changes.pop(k) for k in list(changes) if k.startswith("calibration_")}
    artifact_rate = changes.pop("artifact_rate", None)
    if cal:
        changes["calibration"] = replace(cfg.calibration, **cal)
    if artifact_rate is not None:
        changes["phantom"] = replace(cfg.phantom, echo=replace(cfg.phantom.echo, artifact_rate=float(artifact_rate)))
    out = replace(cfg, **changes)
    if out.calibration.source == "file" and not (out.calibration.file and Path(out.calibration.file).is_file()):
        raise ConfigError(f"calibration file not found: {out.calibration.file}")
    return validate(out)


# -- scene -------------------------------------------------------------------


@dataclass
class Scene:
    """True physical set-up plus the calibration chain estimated from it."""

    true_bundle: CalibrationBundle
    placement: RigidTransform  # true ct -> base
    estimated: CalibrationBundle
    reports: dict = field(default_factory=dict)

    def errors(self) -> dict:
        """Estimated-vs-true discrepancy of each calibrated transform."""
        out = {}
        for key in ("camera_base", "us_ee", "phantom_ct"):
            a, b = getattr(self.true_bundle, key), getattr(self.estimated, key)
            out[key] = {
                "translation_mm": float(np.linalg.norm(a.translation - b.translation)),
                "rotation_deg": float(np.degrees(rotation_angle(a.rotation.T @ b.rotation))),
            }
        chain_t = self.placement.translation - self.estimated.ct_to_base().translation
        out["ct_to_base"] = {
            "translation_mm": float(np.linalg.norm(chain_t)),
            "rotation_deg": float(
                np.degrees(rotation_angle(self.placement.rotation.T @ self.estimated.ct_to_base().rotation))
            ),
        }
        return out


def _small_rotation(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    return rotation_about(axis / np.linalg.norm(axis), np.radians(rng.uniform(0.0, max_deg)))


def true_scene(seed: int, mm_per_pixel: float = DEFAULT_MM_PER_PIXEL, width_px: int = DEFAULT_FRAME_SHAPE[1]):
    """Seeded ground-truth placement of phantom, camera, probe and image plane."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    z = np.array([0.0, 0.0, 1.0])
    placement = RigidTransform(
        rotation_about(z, rng.uniform(-np.pi, np.pi)) @ _small_rotation(rng, 3.0),
        np.array([450.0, 0.0, 80.0]) + rng.uniform(-20.0, 20.0, 3),
        "ct",
        "base",
    )
    camera_base = RigidTransform(
        rotation_about([1.0, 0.0, 0.0], np.pi) @ rotation_about(z, rng.uniform(-np.pi, np.pi)) @ _small_rotation(rng, 10.0),
        np.array([500.0, 0.0, 900.0]) + rng.uniform(-50.0, 50.0, 3),
        "camera",
        "base",
    )
    probe_ee = RigidTransform(_small_rotation(rng, 2.0), np.array([0.0, 0.0, 120.0]) + rng.normal(0.0, 1.0, 3), "probe", "ee")
    mount = RigidTransform(_small_rotation(rng, 1.5), rng.normal(0.0, 0.5, 3), "us", "us")
    us_ee = probe_ee @ image_to_probe(width_px, mm_per_pixel) @ mount
    phantom_ct = (camera_base.inverse() @ placement).inverse()
    bundle = CalibrationBundle(probe_ee, camera_base, us_ee, phantom_ct, mm_per_pixel, DEFAULT_DEPTH_SETTING)
    return bundle, placement


def estimate_calibration(spec, true_bundle: CalibrationBundle, placement: RigidTransform, cal: CalibrationConfig, seed: int):
    """Run the three calibrations on noisy synthetic measurements of the true scene."""
    rng = np.random.default_rng([seed, 0xCA1B])
    board = checkerboard_points()
    cam_pts = true_bundle.camera_base.inverse().apply(board) + rng.normal(0.0, cal.board_noise, board.shape)
    e2h = solve_eye_to_hand(PointCloud(board, "base"), PointCloud(cam_pts, "camera"))

    model = surface_cloud(spec, cal.surface_density, RigidTransform.identity("ct"))
    seen = rng.random(len(model)) < 0.6
    ct_to_camera = true_bundle.phantom_ct.inverse()
    obs_pts = ct_to_camera.apply(model.points[seen]) + rng.normal(0.0, cal.surface_noise, (int(seen.sum()), 3))
    reg = register_phantom(model, PointCloud(obs_pts, "camera"))

    world_point = placement.apply([50.0, 0.0, -30.0])
    obs = synthetic_us_observations(
        true_bundle.us_ee,
        world_point,
        cal.us_poses,
        seed=int(rng.integers(2**31)),
        pixel_noise=cal.pixel_noise,
        mm_per_pixel=true_bundle.mm_per_pixel,
    )
    us = solve_us_calibration(obs, depth_setting=true_bundle.depth_setting)
    estimated = CalibrationBundle(
        true_bundle.probe_ee,
        e2h.transform,
        us.transform,
        reg.transform,
        true_bundle.mm_per_pixel,
        true_bundle.depth_setting,
    )
    return estimated, {"eye_to_hand": e2h, "registration": reg, "us": us}, obs


def build_scene(spec, cfg: ExperimentConfig) -> Scene:
    if cfg.calibration.source == "file":
        try:
            bundle = CalibrationBundle.from_dict(io.read_json(cfg.calibration.file))
        except FileNotFoundError as exc:
            raise ConfigError(f"calibration file not found: {cfg.calibration.file}") from exc
        # a supplied calibration is taken as exact: it describes the true scene
        return Scene(bundle, bundle.ct_to_base(), bundle, {})
    true_bundle, placement = true_scene(cfg.seed)
    estimated, reports, _ = estimate_calibration(spec, true_bundle, placement, cfg.calibration, cfg.seed)
    return Scene(true_bundle, placement, estimated, reports)


def path_endpoints(spec, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    start = np.asarray(cfg.start if cfg.start is not None else spec.config.trunk[0], dtype=float)
    if cfg.end is not None:
        end = np.asarray(cfg.end, dtype=float)
    else:
        end = 0.5 * (np.asarray(spec.config.branch_a[-1], dtype=float) + np.asarray(spec.config.branch_b[-1], dtype=float))
    return start, end


def plan_scan(spec, scene: Scene, cfg: ExperimentConfig):
    """Plan in the base frame using only estimated quantities."""
    ct_to_base = scene.estimated.ct_to_base()
    surface = surface_cloud(spec, 1.0, ct_to_base)
    start, end = path_endpoints(spec, cfg)
    return plan_path(surface, ct_to_base.apply(start), ct_to_base.apply(end), cfg.spacing, cfg.band)


def segment_params(cfg: ExperimentConfig, jobs: int = 1) -> SegmentParams:
    classical = ClassicalParams(threshold=cfg.threshold, method=cfg.threshold_method)
    return SegmentParams(classical=classical, stub_seed=cfg.stub_seed, jobs=jobs)


def mean_dice(recording, segmentation) -> float:
    size = segmentation[0].mask.pixels.shape[0]
    scores = []
    for entry, seg in zip(recording.entries, segmentation):
        f = entry.frame
        factor = f.shape[0] / size
        truth = rasterize(f.sections, seg.mask.pixels.shape, f.mm_per_pixel, factor)
        scores.append(dice_iou(seg.mask.pixels, truth)[0])
    return float(np.mean(scores))


@dataclass
class PipelineResult:
    config: ExperimentConfig
    directory: Path
    summary: dict
    evaluation: object
    raw: object
    filtered_input: object
    truth: object


def _comments(cfg: ExperimentConfig) -> list[str]:
    return [f"config_hash={cfg.hash}", f"seed={cfg.seed}"]


def _write_centerline(path, line, comments):
    io.write_ply(path, line.cloud(), {"frame_index": line.frame_index, "area_mm2": line.area_mm2}, comments)


def run_pipeline(cfg: ExperimentConfig, out, jobs: int = 1) -> PipelineResult:
    """Phantom -> plan -> simulate -> segment -> reconstruct -> evaluate, writing every artifact.

    Artifacts land in ``out``; on failure whatever was written so far stays
    and a :class:`StageError` names the stage.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed, "name": cfg.name}
    comments = _comments(cfg)
    io.write_json(out / "config.json", {**meta, "config": cfg.to_dict()})

    with stage("phantom"):
        spec = build_phantom(cfg.phantom)
        io.write_json(out / "phantom.json", {**meta, "phantom": spec.to_dict()})
        _write_centerline(out / "ground_truth_ct.ply", spec.ground_truth, comments)

    with stage("calibrate"):
        scene = build_scene(spec, cfg)
        cal_dir = out / "calibration"
        io.write_json(cal_dir / "bundle.json", {**meta, **scene.estimated.to_dict()})
        io.write_json(cal_dir / "true_bundle.json", {**meta, **scene.true_bundle.to_dict()})
        for key, rep in scene.reports.items():
            io.write_json(cal_dir / f"{key}.json", {**meta, **rep.to_dict()})
        io.write_json(cal_dir / "errors.json", {**meta, "errors": scene.errors()})

    with stage("plan"):
        path = plan_scan(spec, scene, cfg)
        io.write_json(out / "path.json", {**meta, **path.to_dict()})

    with stage("simulate"):
        recording = simulate_scan(
            spec,
            path,
            scene.true_bundle,
            placement=scene.placement,
            recorded_bundle=scene.estimated,
            pose_noise=cfg.pose_noise,
            seed=cfg.seed,
            jobs=jobs,
        )
        recording.metadata.update(meta)
        write_recording(recording, out / "recording", comments)
        artifacts = sum(len(e.frame.artifacts) for e in recording.entries)

    with stage("segment"):
        segmentation = segment_video(recording, cfg.backend, segment_params(cfg, jobs))
        write_segmentation(segmentation, out / "segmentation", comments)
        dice = mean_dice(recording, segmentation)

    with stage("reconstruct"):
        detections = [d for s in segmentation for d in s.detections]
        native_w = recording.entries[0].frame.shape[1]
        factor = native_w / segmentation[0].mask.pixels.shape[1]
        kept = filter_detections(detections, native_w, cfg.filter_px, factor)
        X = recording.calibration_bundle.us_ee
        s = recording.calibration_bundle.mm_per_pixel
        raw = lift_centroids(detections, recording, X, s, factor)
        px_filtered = lift_centroids(kept, recording, X, s, factor)
        truth = spec.ground_truth.transformed(scene.estimated.ct_to_base())
        cdir = out / "centerline"
        _write_centerline(cdir / "unfiltered.ply", raw, comments)
        _write_centerline(cdir / "px_filtered.ply", px_filtered, comments)
        _write_centerline(cdir / "truth_base.ply", truth, comments)

    with stage("evaluate"):
        # the unfiltered variant is every raw detection, before the lateral filter too
        ev = evaluate_variants(px_filtered, truth, cfg.cutoff_mm, cfg.align_independently, unfiltered=raw)
        filtered_line = px_filtered.subset(ev.kept).transformed(ev.transform)
        _write_centerline(cdir / "filtered_aligned.ply", filtered_line, comments)
        edir = out / "evaluation"
        for name, rep in (("unfiltered", ev.unfiltered), ("filtered", ev.filtered)):
            rep.write_json(edir / f"{name}.json", **meta)
            rep.write_csv(edir / f"{name}_errors.csv", comments)
        io.write_transform(edir / "alignment.json", ev.transform, **meta)

    summary = {
        **meta,
        "frames": len(recording),
        "artifacts_injected": int(artifacts),
        "detections": len(detections),
        "detections_after_px_filter": len(kept),
        "mean_dice": dice,
        "calibration_errors": scene.errors(),
        "unfiltered": ev.unfiltered.to_dict(include_errors=False),
        "filtered": ev.filtered.to_dict(include_errors=False),
        "plane_fit_rms": path.metadata["plane_fit_rms"],
    }
    io.write_json(out / "summary.json", summary)
    write_summary_csv(out / "summary.csv", [summary], comments)

    if cfg.figures:
        with stage("report"):
            from . import plotting

            fig = out / "figures"
            plotting.error_violins(
                [(cfg.name, ev.unfiltered.per_point_errors, ev.filtered.per_point_errors)],
                fig / "errors_violin.png",
            )
            plotting.centerline_overlay(
                truth.points, raw.transformed(ev.unfiltered_transform).points, filtered_line.points, fig / "centerline_3d.png", cfg.name
            )
            k = _busiest_frame(segmentation)
            cents = [native_coordinate(d.centroid_px, factor) for d in segmentation[k].detections]
            plotting.frame_with_detections(
                recording.entries[k].frame.pixels, np.reshape(cents, (-1, 2)), fig / "frame_example.png", cfg.filter_px, f"frame {k}"
            )
    return PipelineResult(cfg, out, summary, ev, raw, px_filtered, truth)


def _busiest_frame(segmentation) -> int:
    counts = [len(s.detections) for s in segmentation]
    return int(np.argmax(counts))


SUMMARY_COLUMNS = ("phantom", "variant", "mean_l2_mm", "std_l2_mm", "hausdorff_mm", "points", "config_hash", "seed")


def write_summary_csv(path, summaries, comments=()) -> None:
    """Table rows: mean, std, directed Hausdorff and point count per phantom and variant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            for variant in ("unfiltered", "filtered"):
                r = s[variant]
                w.writerow(
                    [
                        s["name"],
                        variant,
                        f"{r['mean_l2']:.6f}",
                        f"{r['std_l2']:.6f}",
                        f"{r['hausdorff']:.6f}",
                        r["point_count"],
                        s["config_hash"],
                        s["seed"],
                    ]
                )


def run_many(configs, out, jobs: int = 1) -> tuple[list[PipelineResult], dict]:
    """Run several configs into ``out/<name>/`` and write a combined table."""
    out = Path(out)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"config names must be unique, got {names}")
    results = [run_pipeline(c, out / c.name, jobs) for c in configs]
    combined_hash = io.config_hash([c.hash for c in configs])
    seeds = sorted({c.seed for c in configs})
    summary = {
        "config_hash": combined_hash,
        "seed": seeds[0] if len(seeds) == 1 else seeds,
        "runs": [r.summary for r in results],
    }
    io.write_json(out / "summary.json", summary)
    write_summary_csv(out / "summary.csv", summary["runs"], [f"config_hash={combined_hash}", f"seed={summary['seed']}"])
    if any(c.figures for c in configs):
        from . import plotting

        plotting.error_violins(
            [(r.config.name, r.evaluation.unfiltered.per_point_errors, r.evaluation.filtered.per_point_errors) for r in results],
            out / "figures" / "errors_violin.png",
        )
    return results, summary
