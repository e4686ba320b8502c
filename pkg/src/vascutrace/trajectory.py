"""Scan-path planning over a surface point cloud.

The path is the trace of the surface on the plane that contains the
start->end line and is perpendicular to the surface's best-fit plane,
resampled at a fixed arc-length spacing. The probe keeps one orientation
along the whole path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import PointCloud, RigidTransform, fit_plane


class PlanningError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbePath:
    waypoints: list[RigidTransform]
    spacing: float
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.waypoints)

    @property
    def origins(self) -> np.ndarray:
        return np.array([w.translation for w in self.waypoints]).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {
            "spacing": self.spacing,
            "metadata": self.metadata,
            "waypoints": [w.to_dict() for w in self.waypoints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProbePath:
        return cls([RigidTransform.from_dict(w) for w in d["waypoints"]], float(d["spacing"]), d.get("metadata", {}))


def _local_height(s, l, h, s_query, window):
    """Height of the surface on the cut plane (l = 0) from a local linear fit h ~ a + b s + c l."""
    out = np.empty(len(s_query))
    for k, sq in enumerate(s_query):
        w = window
        sel = np.abs(s - sq) <= w
        while sel.sum() < 6 and w < 64 * window:
            w *= 2
            sel = np.abs(s - sq) <= w
        if sel.sum() < 3:
            raise PlanningError(f"too few surface points near path position {sq:.2f} mm")
        A = np.column_stack([np.ones(sel.sum()), s[sel] - sq, l[sel]])
        coef, *_ = np.linalg.lstsq(A, h[sel], rcond=None)
        out[k] = coef[0]
    return out


def plan_path(
    surface: PointCloud,
    start,
    end,
    spacing: float = 1.0,
    band: float = 2.0,
    flip_probe_z: bool = False,
) -> ProbePath:
    """Plan constant-orientation probe waypoints from ``start`` to ``end``.

    Parameters
    ----------
    surface
        Skin surface cloud, in the same frame as ``start``/``end`` (robot base).
    start, end
        Arterial end points; only their projections along the path matter.
    spacing
        Arc-length spacing of waypoints in mm.
    band
        Half-width (mm) of the slab around the cut plane whose points are
        taken as lying on it.
    flip_probe_z
        Point the probe z-axis along the plane normal instead of into the surface.

    Returns
    -------
    ProbePath
        Waypoints map probe frame -> ``surface.frame``. ``metadata`` carries the
        plane-fit RMS so a poor planar surface model is visible downstream.
    """
    if spacing <= 0 or band <= 0:
        raise ValueError("spacing and band must be positive")
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if np.allclose(start, end):
        raise PlanningError("start and end points coincide")
    plane = fit_plane(surface)
    n = plane.normal
    d = (end - start) / np.linalg.norm(end - start)
    m = np.cross(d, n)
    if np.linalg.norm(m) < 1e-9:
        raise PlanningError("start->end line is parallel to the surface normal")
    m /= np.linalg.norm(m)
    e = np.cross(n, m)  # along the path, inside the best-fit plane

    length = float(np.linalg.norm(end - start))
    if float(d @ e) < 0:
        # flip both so e = n x m still holds while walking from start to end
        e, m = -e, -m

    P = surface.points
    lateral = (P - start) @ m
    sel = np.abs(lateral) <= band
    if not np.any(sel):
        raise PlanningError(f"no surface points within {band} mm of the cut plane")
    s = P[sel] @ e
    h = P[sel] @ n
    l = lateral[sel]
    # positions along the path are measured by projection onto the start->end line
    along = (P[sel] - start) @ d
    inside = (along >= -band) & (along <= length + band)
    if inside.sum() < 3:
        raise PlanningError("surface cloud does not cover the start->end span")
    s, h, l = s[inside], h[inside], l[inside]
    if np.ptp(s) < 1e-9:
        raise PlanningError("start and end project to the same point on the surface")

    window = max(spacing, band)
    ds = min(spacing, band) / 8.0
    base = (start @ m) * m

    def curve(s_grid):
        return base + np.outer(s_grid, e) + np.outer(_local_height(s, l, h, s_grid, window), n)

    # locate the cut-plane positions whose projection hits 0 and the line length
    s_probe = np.linspace(s.min(), s.max(), int(np.ceil(np.ptp(s) / spacing)) + 2)
    t_probe = (curve(s_probe) - start) @ d
    if np.any(np.diff(t_probe) <= 0):
        raise PlanningError("surface trace folds back along the start->end direction")
    s0, s1 = np.interp([0.0, length], t_probe, s_probe)
    s_dense = np.linspace(s0, s1, int(np.ceil((s1 - s0) / ds)) + 1)
    dense = curve(s_dense)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    count = int(np.floor(arc[-1] / spacing + 1e-9)) + 1
    targets = spacing * np.arange(count)
    s_way = np.interp(targets, arc, s_dense)
    # evaluate the surface fit at the resampled positions rather than on the dense chord
    h_way = _local_height(s, l, h, s_way, window)
    origins = base + np.outer(s_way, e) + np.outer(h_way, n)

    z = n.copy() if flip_probe_z else -n
    x = m if not flip_probe_z else -m
    y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    R.setflags(write=False)
    frame = surface.frame
    waypoints = [RigidTransform(R, o, "probe", frame) for o in origins]
    # share one rotation array so every waypoint has bitwise the same orientation
    for w in waypoints[1:]:
        object.__setattr__(w, "rotation", waypoints[0].rotation)
    meta = {
        "plane_normal": n.tolist(),
        "plane_offset": plane.offset,
        "plane_fit_rms": plane.rms,
        "band": band,
        "band_points": int(inside.sum()),
        "path_length": float(arc[-1]),
    }
    return ProbePath(waypoints, spacing, meta)
