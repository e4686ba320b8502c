"""Centerline estimation from lumen detections and scoring against ground truth.

Detections live in mask space (the 256 x 256 segmentation grid). They are
mapped back to native frame pixels, lifted through the recorded end-effector
pose and the image calibration, and stacked in scan order.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .geom import Centerline, IcpParams, PointCloud, RigidTransform, icp

DEFAULT_FILTER_PX = 85.0
DEFAULT_CUTOFF_MM = 5.0
# 39.68 mm widest observed bifurcation plus a 12.5% margin, rounded up
FILTER_WIDTH_MM = 45.0


class FilterWarning(UserWarning):
    """The truth-distance cutoff left (almost) nothing."""


def native_coordinate(c, resize_factor: float):
    """Mask-space pixel coordinate -> native-frame pixel coordinate.

    Uses the half-pixel-centre convention of bilinear resizing, so the mask
    pixel centre ``c`` covers native ``(c + 0.5) * f - 0.5``.
    """
    return (np.asarray(c, dtype=float) + 0.5) * resize_factor - 0.5


def filter_detections(detections, image_width_px: int = 512, threshold_px: float = DEFAULT_FILTER_PX, resize_factor: float = 1.0):
    """Drop detections whose horizontal offset from the image centre exceeds ``threshold_px``.

    Offsets are measured in native pixels. ``resize_factor`` is native width
    over mask width (2 for 512-wide frames segmented at 256).
    """
    if not threshold_px > 0:
        raise ValueError("threshold_px must be positive")
    centre = image_width_px / 2.0
    return [d for d in detections if abs(native_coordinate(d.centroid_px[0], resize_factor) - centre) <= threshold_px]


def lift_centroids(
    detections,
    recording,
    calib: RigidTransform,
    scale: float = 0.2694,
    resize_factor: float = 2.0,
) -> Centerline:
    """Map detections to 3-D points in the recording's base frame.

    ``p = B_k . X . (u s, v s, 0)`` with ``B_k`` the recorded end-effector
    pose of the detection's frame and ``X`` the image -> end-effector
    calibration. Areas become mm^2 via ``(s f)^2``.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    n_frames = len(recording.entries)
    dets = sorted(detections, key=lambda d: d.frame_index)
    pts, fidx, areas = [], [], []
    frame = None
    for d in dets:
        k = d.frame_index
        if not 0 <= k < n_frames:
            raise IndexError(f"detection refers to frame {k}, recording has {n_frames} frames")
        pose = recording.entries[k].pose
        u, v = native_coordinate(d.centroid_px, resize_factor)
        chain = pose @ calib
        pts.append(chain.apply([u * scale, v * scale, 0.0]))
        fidx.append(k)
        areas.append(d.area_px * (resize_factor * scale) ** 2)
        frame = chain.to_frame
    if frame is None:
        frame = recording.entries[0].pose.to_frame if n_frames else "base"
    return Centerline(np.reshape(pts, (-1, 3)), np.array(fidx, dtype=int), np.array(areas), frame)


def _points(x) -> np.ndarray:
    if isinstance(x, (PointCloud, Centerline)):
        x = x.points
    return np.asarray(x, dtype=float).reshape(-1, 3)


def nearest_distances(A, B, candidates: int = 4) -> np.ndarray:
    """Distance from every point of ``A`` to its nearest point in ``B``.

    The k-d tree proposes a few candidates; the returned value is the exact
    Euclidean norm of the best one, evaluated as ``sqrt(dx*dx + dy*dy + dz*dz)``
    so results agree bit-for-bit with a scalar double loop.
    """
    A, B = _points(A), _points(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("nearest-neighbour distances need non-empty point sets")
    k = min(candidates, len(B))
    _, idx = cKDTree(B).query(A, k=k)
    idx = np.asarray(idx).reshape(len(A), k)
    diff = A[:, None, :] - B[idx]
    d = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2])
    return d.min(axis=1)


def hausdorff(A, B, directed: bool = False) -> float:
    """Hausdorff distance; ``directed=True`` gives ``sup_a inf_b |a - b|`` only."""
    h = float(nearest_distances(A, B).max())
    if directed:
        return h
    return max(h, float(nearest_distances(B, A).max()))


@dataclass
class EvaluationReport:
    """Per-point nearest-truth errors and their summary.

    ``std_l2`` is the population standard deviation. ``l2_aggregate`` is the
    root of the summed squared errors.
    """

    mean_l2: float
    std_l2: float
    hausdorff: float
    point_count: int
    per_point_errors: np.ndarray
    filtered: bool = False
    hausdorff_kind: str = "directed"
    frame_index: np.ndarray | None = None
    aligned: bool = False

    @property
    def l2_aggregate(self) -> float:
        return float(np.sqrt(np.sum(np.square(self.per_point_errors))))

    def to_dict(self, include_errors: bool = True) -> dict:
        d = {
            "mean_l2": float(self.mean_l2),
            "std_l2": float(self.std_l2),
            "std_kind": "population",
            "hausdorff": float(self.hausdorff),
            "hausdorff_kind": self.hausdorff_kind,
            "point_count": int(self.point_count),
            "filtered": bool(self.filtered),
            "aligned": bool(self.aligned),
            "l2_aggregate": self.l2_aggregate,
        }
        if include_errors:
            d["per_point_errors"] = [float(e) for e in self.per_point_errors]
        return d

    def write_json(self, path, **meta) -> None:
        io.write_json(path, {**meta, **self.to_dict()})

    def write_csv(self, path, comments=()) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fi = self.frame_index if self.frame_index is not None else np.full(self.point_count, -1)
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point", "frame_index", "error_mm", "filtered"])
            for i, (f, e) in enumerate(zip(fi, self.per_point_errors)):
                w.writerow([i, int(f), repr(float(e)), int(self.filtered)])


def _report(errors: np.ndarray, filtered: bool, frame_index=None, aligned=False) -> EvaluationReport:
    return EvaluationReport(
        float(errors.mean()),
        float(errors.std()),
        float(errors.max()),
        len(errors),
        errors,
        filtered,
        "directed",
        None if frame_index is None else np.asarray(frame_index),
        aligned,
    )


def l2_profile(reconstructed: Centerline, truth: Centerline, filtered: bool = False) -> EvaluationReport:
    """Nearest-truth distance of every reconstructed point, summarised."""
    if len(reconstructed) == 0 or len(truth) == 0:
        raise ValueError("l2_profile needs non-empty centerlines")
    errors = nearest_distances(reconstructed, truth)
    return _report(errors, filtered, getattr(reconstructed, "frame_index", None))


@dataclass
class AlignmentOutcome:
    transform: RigidTransform
    before: EvaluationReport
    after: EvaluationReport
    icp_iterations: int = 0


def _check_frames(a: Centerline, b: Centerline):
    if a.frame != b.frame:
        raise ValueError(f"centerlines are in different frames: {a.frame!r} vs {b.frame!r}")


def align_and_evaluate(
    reconstructed: Centerline,
    truth: Centerline,
    params: IcpParams | None = None,
    filtered: bool = False,
) -> AlignmentOutcome:
    """ICP-align ``reconstructed`` onto ``truth`` from identity, scoring before and after."""
    if len(reconstructed) < 3 or len(truth) < 3:
        raise ValueError("alignment needs at least three points on each centerline")
    _check_frames(reconstructed, truth)
    before = l2_profile(reconstructed, truth, filtered)
    res = icp(reconstructed.cloud(), truth.cloud(), RigidTransform.identity(truth.frame), params)
    T = res.transform
    after = l2_profile(reconstructed.transformed(T), truth, filtered)
    after.aligned = True
    return AlignmentOutcome(T, before, after, res.iterations)


def manual_filter(reconstructed: Centerline, truth: Centerline, cutoff: float = DEFAULT_CUTOFF_MM, warn_below: float = 0.1):
    """Keep reconstructed points within ``cutoff`` mm of the truth.

    Stands in for hand-removal of off-vessel centroids. Returns the kept
    centerline and the boolean mask. A :class:`FilterWarning` is raised when
    fewer than ``warn_below`` of the points survive.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    if len(reconstructed) == 0:
        return reconstructed, np.zeros(0, dtype=bool)
    if math.isinf(cutoff):
        return reconstructed, np.ones(len(reconstructed), dtype=bool)
    keep = nearest_distances(reconstructed, truth) <= cutoff
    if keep.mean() < warn_below:
        warnings.warn(
            f"truth-distance cutoff {cutoff} mm kept {int(keep.sum())} of {len(keep)} points",
            FilterWarning,
            stacklevel=2,
        )
    return reconstructed.subset(keep), keep


@dataclass
class VariantEvaluation:
    """Unfiltered and filtered scores of one reconstruction."""

    unfiltered: EvaluationReport
    filtered: EvaluationReport
    transform: RigidTransform
    unfiltered_transform: RigidTransform
    kept: np.ndarray
    before: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"variant": "unfiltered", **self.unfiltered.to_dict(include_errors=False)},
            {"variant": "filtered", **self.filtered.to_dict(include_errors=False)},
        ]


def evaluate_variants(
    reconstructed: Centerline,
    truth: Centerline,
    cutoff: float = DEFAULT_CUTOFF_MM,
    align_independently: bool = False,
    params: IcpParams | None = None,
    unfiltered: Centerline | None = None,
) -> VariantEvaluation:
    """Score a reconstruction with and without the truth-distance filter.

    The filter is applied to the unaligned ``reconstructed`` points. By
    default one ICP transform is estimated on the filtered points and applied
    to both variants; ``align_independently`` fits a second one to the
    unfiltered set. ``unfiltered`` (default ``reconstructed``) is the point set
    scored as the unfiltered variant, e.g. detections before any filtering.
    """
    _check_frames(reconstructed, truth)
    unfiltered = reconstructed if unfiltered is None else unfiltered
    _check_frames(unfiltered, truth)
    kept_line, keep = manual_filter(reconstructed, truth, cutoff)
    filt = align_and_evaluate(kept_line, truth, params, filtered=True)
    if align_independently:
        unf = align_and_evaluate(unfiltered, truth, params, filtered=False)
        T_unf, unf_report = unf.transform, unf.after
    else:
        T_unf = filt.transform
        unf_report = l2_profile(unfiltered.transformed(T_unf), truth, filtered=False)
        unf_report.aligned = True
    before = {
        "unfiltered": l2_profile(unfiltered, truth, False).to_dict(include_errors=False),
        "filtered": filt.before.to_dict(include_errors=False),
    }
    return VariantEvaluation(unf_report, filt.after, filt.transform, T_unf, keep, before)


def summary_rows(results: Sequence[tuple[str, VariantEvaluation]]) -> list[dict]:
    """Flatten per-phantom evaluations into table rows (mean, std, Hausdorff, points)."""
    rows = []
    for name, ev in results:
        for r in ev.rows():
            rows.append(
                {
                    "phantom": name,
                    "variant": r["variant"],
                    "mean_l2_mm": r["mean_l2"],
                    "std_l2_mm": r["std_l2"],
                    "hausdorff_mm": r["hausdorff"],
                    "points": r["point_count"],
                }
            )
    return rows
