"""Digital bifurcated-vessel phantom and a B-mode-like frame simulator.

The vessel is a union of three tubes around cubic-spline centerlines (a
trunk and two branches leaving its distal end). Cross-sections are computed
analytically, so every rendered frame comes with an exact lumen mask and
exact lumen centres to test segmentation and reconstruction against.

Phantom coordinates ("ct" frame): z points up, the skin surface is the
heightfield z = h(x, y) and vessels run below it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import io
from .geom import Centerline, PointCloud, RigidTransform

DEFAULT_MM_PER_PIXEL = 0.2694
DEFAULT_FRAME_SHAPE = (512, 512)
DEFAULT_DEPTH_SETTING = 100.0
FRAME_INTERVAL_S = 0.033
MIN_RADIUS_MM = 2.0
DEPTH_BOUNDS_MM = (12.0, 56.0)
SEGMENTS = ("trunk", "branch_a", "branch_b")


class PhantomValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("phantom constraints violated: " + "; ".join(self.violations))


@dataclass(frozen=True)
class Heightfield:
    """Skin surface z = h(x, y): plane + quadratic + Gaussian bumps.

    ``bumps`` holds ``(cx, cy, amplitude, sigma)`` tuples.
    """

    base: float = 0.0
    slope: tuple[float, float] = (0.0, 0.0)
    curvature: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bumps: tuple[tuple[float, float, float, float], ...] = ()

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        cxx, cyy, cxy = self.curvature
        z = self.base + self.slope[0] * x + self.slope[1] * y + cxx * x * x + cyy * y * y + cxy * x * y
        for cx, cy, amp, sigma in self.bumps:
            z = z + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma**2))
        return z

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "slope": list(self.slope),
            "curvature": list(self.curvature),
            "bumps": [list(b) for b in self.bumps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Heightfield:
        return cls(
            base=float(d.get("base", 0.0)),
            slope=tuple(float(v) for v in d.get("slope", (0.0, 0.0))),
            curvature=tuple(float(v) for v in d.get("curvature", (0.0, 0.0, 0.0))),
            bumps=tuple(tuple(float(v) for v in b) for b in d.get("bumps", ())),
        )


@dataclass(frozen=True)
class EchoParams:
    background_mean: float = 130.0
    background_sigma: float = 30.0
    lumen_mean: float = 25.0
    lumen_sigma: float = 10.0
    artifact_rate: float = 0.05


@dataclass(frozen=True)
class PhantomConfig:
    """User-facing phantom parameters.

    Branch control points exclude their first point, which is always the
    trunk's last control point (the bifurcation). A radius is either a
    constant or a ``(proximal, distal)`` pair for a linear taper.
    """

    trunk: tuple
    branch_a: tuple
    branch_b: tuple
    radius: dict = field(default_factory=lambda: {"trunk": 3.5, "branch_a": 3.0, "branch_b": 3.0})
    surface: Heightfield = Heightfield()
    extent: tuple[float, float, float, float] = (-20.0, 140.0, -60.0, 60.0)
    echo: EchoParams = EchoParams()
    seed: int = 0
    random_bumps: int = 0
    depth_bounds: tuple[float, float] = DEPTH_BOUNDS_MM

    @classmethod
    def from_dict(cls, d: dict) -> PhantomConfig:
        d = dict(d)
        kw = {}
        for name in SEGMENTS:
            kw[name] = tuple(tuple(float(v) for v in p) for p in d.pop(name))
        if "surface" in d:
            kw["surface"] = Heightfield.from_dict(d.pop("surface"))
        if "echo" in d:
            kw["echo"] = EchoParams(**{k: float(v) for k, v in d.pop("echo").items()})
        if "radius" in d:
            kw["radius"] = {k: (tuple(v) if isinstance(v, (list, tuple)) else float(v)) for k, v in d.pop("radius").items()}
        for key in ("extent", "depth_bounds"):
            if key in d:
                kw[key] = tuple(float(v) for v in d.pop(key))
        for key in ("seed", "random_bumps"):
            if key in d:
                kw[key] = int(d.pop(key))
        if d:
            raise ValueError(f"unknown phantom config keys: {sorted(d)}")
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "trunk": [list(p) for p in self.trunk],
            "branch_a": [list(p) for p in self.branch_a],
            "branch_b": [list(p) for p in self.branch_b],
            "radius": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.radius.items())},
            "surface": self.surface.to_dict(),
            "extent": list(self.extent),
            "echo": asdict(self.echo),
            "seed": self.seed,
            "random_bumps": self.random_bumps,
            "depth_bounds": list(self.depth_bounds),
        }


_GL_NODES, _GL_WEIGHTS = leggauss(12)


class SplineSegment:
    """Cubic spline through control points with an arc-length parametrisation."""

    def __init__(self, name: str, control_points, radius):
        self.name = name
        pts = np.asarray(control_points, dtype=float).reshape(-1, 3)
        if len(pts) < 2:
            raise ValueError(f"segment {name!r} needs at least 2 control points")
        chord = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(chord <= 0):
            raise ValueError(f"segment {name!r} has repeated control points")
        self.knots = np.concatenate([[0.0], np.cumsum(chord)])
        self.control_points = pts
        self.spline = CubicSpline(self.knots, pts, bc_type="natural")
        self._deriv = self.spline.derivative()
        # cumulative arc length at each knot, 8 sub-intervals per knot span
        self._breaks = np.unique(
            np.concatenate([np.linspace(a, b, 9) for a, b in zip(self.knots[:-1], self.knots[1:])])
        )
        pieces = [self._quad(a, b) for a, b in zip(self._breaks[:-1], self._breaks[1:])]
        self._cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self.length = float(self._cum[-1])
        if isinstance(radius, (tuple, list)):
            self.r0, self.r1 = float(radius[0]), float(radius[1])
        else:
            self.r0 = self.r1 = float(radius)

    @property
    def t_end(self) -> float:
        return float(self.knots[-1])

    def _quad(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        half = 0.5 * (b - a)
        t = 0.5 * (a + b) + half * _GL_NODES
        return float(half * np.sum(_GL_WEIGHTS * np.linalg.norm(self._deriv(t), axis=-1)))

    def point(self, t):
        return self.spline(t)

    def tangent(self, t):
        d = self._deriv(t)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def arc_length(self, t: float) -> float:
        t = min(max(float(t), 0.0), self.t_end)
        k = int(np.clip(np.searchsorted(self._breaks, t, side="right") - 1, 0, len(self._breaks) - 2))
        return float(self._cum[k] + self._quad(self._breaks[k], t))

    def param_at(self, s: float) -> float:
        if s <= 0.0:
            return 0.0
        if s >= self.length:
            return self.t_end
        return brentq(lambda t: self.arc_length(t) - s, 0.0, self.t_end, xtol=1e-13)

    def radius_at_arc(self, s):
        frac = np.clip(np.asarray(s, dtype=float) / self.length, 0.0, 1.0)
        return self.r0 + (self.r1 - self.r0) * frac

    def sample_arc(self, arcs) -> np.ndarray:
        return np.array([self.point(self.param_at(s)) for s in arcs]).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    config: PhantomConfig
    surface: Heightfield
    segments: tuple[SplineSegment, ...]
    ground_truth: Centerline
    ground_truth_segment: np.ndarray

    @property
    def echo(self) -> EchoParams:
        return self.config.echo

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def bifurcation(self) -> np.ndarray:
        return self.segments[0].point(self.segments[0].t_end)

    def segment(self, name: str) -> SplineSegment:
        return self.segments[SEGMENTS.index(name)]

    def depths(self, points=None) -> np.ndarray:
        p = self.ground_truth.points if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
        return self.surface(p[:, 0], p[:, 1]) - p[:, 2]

    def to_dict(self) -> dict:
        cfg = self.config.to_dict()
        # the seed-derived bumps are part of the realised surface
        cfg["surface"] = self.surface.to_dict()
        cfg["random_bumps"] = 0
        return cfg


def _seeded_bumps(cfg: PhantomConfig) -> tuple:
    if cfg.random_bumps <= 0:
        return ()
    rng = np.random.default_rng(cfg.seed)
    x0, x1, y0, y1 = cfg.extent
    out = []
    for _ in range(cfg.random_bumps):
        out.append(
            (
                float(rng.uniform(x0, x1)),
                float(rng.uniform(y0, y1)),
                float(rng.uniform(-3.0, 3.0)),
                float(rng.uniform(10.0, 25.0)),
            )
        )
    return tuple(out)


def build_phantom(config: PhantomConfig | dict) -> PhantomSpec:
    """Validate a phantom config and derive its 1 mm ground-truth centerline.

    The trunk is sampled backwards from the bifurcation so that the
    bifurcation point is a sample; each branch is sampled forwards from it
    and drops its first sample, so the bifurcation appears exactly once.
    """
    cfg = PhantomConfig.from_dict(config) if isinstance(config, dict) else config
    violations = []
    radii = {}
    for name in SEGMENTS:
        r = cfg.radius.get(name)
        if r is None:
            violations.append(f"missing radius for {name}")
            continue
        rs = r if isinstance(r, tuple) else (r,)
        if min(rs) < MIN_RADIUS_MM:
            violations.append(f"{name} radius {min(rs):g} mm < {MIN_RADIUS_MM:g} mm (4 mm minimum diameter)")
        radii[name] = r
    if violations:
        raise PhantomValidationError(violations)

    surface = Heightfield(
        cfg.surface.base, cfg.surface.slope, cfg.surface.curvature, cfg.surface.bumps + _seeded_bumps(cfg)
    )
    trunk = SplineSegment("trunk", cfg.trunk, radii["trunk"])
    bif = trunk.control_points[-1]
    segs = [trunk]
    for name in ("branch_a", "branch_b"):
        pts = np.asarray(getattr(cfg, name), dtype=float).reshape(-1, 3)
        if np.allclose(pts[0], bif, atol=0.0):
            pts = pts[1:]
        segs.append(SplineSegment(name, np.vstack([bif, pts]), radii[name]))

    trunk_arcs = trunk.length - np.arange(int(math.floor(trunk.length + 1e-9)), -1, -1, dtype=float)
    pts = [trunk.sample_arc(trunk_arcs)]
    pts[0][-1] = bif  # exact bifurcation continuity
    labels = [np.zeros(len(trunk_arcs), dtype=int)]
    for k, seg in enumerate(segs[1:], start=1):
        arcs = np.arange(1, int(math.floor(seg.length + 1e-9)) + 1, dtype=float)
        pts.append(seg.sample_arc(arcs))
        labels.append(np.full(len(arcs), k, dtype=int))
    gt_pts = np.vstack(pts)
    radius = np.concatenate(
        [segs[0].radius_at_arc(trunk_arcs)] + [segs[k].radius_at_arc(np.arange(1, len(l) + 1)) for k, l in enumerate(labels[1:], 1)]
    )
    gt = Centerline(gt_pts, None, np.pi * radius**2, "ct")

    depth = surface(gt_pts[:, 0], gt_pts[:, 1]) - gt_pts[:, 2]
    lo, hi = cfg.depth_bounds
    if depth.min() < lo - 1e-9:
        violations.append(f"centerline depth {depth.min():.2f} mm < {lo:g} mm")
    if depth.max() > hi + 1e-9:
        violations.append(f"centerline depth {depth.max():.2f} mm > {hi:g} mm")
    if violations:
        raise PhantomValidationError(violations)
    return PhantomSpec(cfg, surface, tuple(segs), gt, np.concatenate(labels))


def surface_cloud(spec: PhantomSpec, density: float = 1.0, transform: RigidTransform | None = None) -> PointCloud:
    """Regular grid over the phantom extent, ``density`` points per mm^2.

    Without ``transform`` the cloud is labelled ``"camera"`` with the camera
    frame coinciding with phantom coordinates; with it the points are mapped
    and labelled ``transform.to_frame``.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    step = 1.0 / math.sqrt(density)
    x0, x1, y0, y1 = spec.config.extent
    xs = x0 + step * np.arange(int(math.floor((x1 - x0) / step + 1e-9)) + 1)
    ys = y0 + step * np.arange(int(math.floor((y1 - y0) / step + 1e-9)) + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), spec.surface(X, Y).ravel()])
    if transform is None:
        return PointCloud(pts, "camera")
    return PointCloud(transform.apply(pts), transform.to_frame)


@dataclass(frozen=True)
class CrossSection:
    """A tube/image-plane intersection in in-plane millimetre coordinates."""

    segment: str
    center_mm: np.ndarray  # (x, y) in the image plane, mm from pixel (0, 0)
    center_ct: np.ndarray
    tangent_inplane: np.ndarray  # tube tangent projected on image x/y axes
    cos_incidence: float  # |tangent . image normal|
    radius: float

    @property
    def axes_mm(self) -> tuple[float, float]:
        """(semi-major, semi-minor) in mm."""
        return self.radius / max(self.cos_incidence, 1e-12), self.radius

    def contains(self, X, Y):
        dx = np.asarray(X) - self.center_mm[0]
        dy = np.asarray(Y) - self.center_mm[1]
        along = dx * self.tangent_inplane[0] + dy * self.tangent_inplane[1]
        return dx * dx + dy * dy - along * along < self.radius**2


def cross_sections(spec: PhantomSpec, image_to_ct: RigidTransform, samples_per_mm: float = 4.0) -> list[CrossSection]:
    """All crossings of the tube centerlines with the image plane."""
    R, o = image_to_ct.rotation, image_to_ct.translation
    ax, ay, n = R[:, 0], R[:, 1], R[:, 2]
    out = []
    for seg in spec.segments:
        m = max(int(seg.length * samples_per_mm), 8)
        ts = np.linspace(0.0, seg.t_end, m + 1)
        d = (seg.point(ts) - o) @ n
        crossings = np.nonzero((d[:-1] == 0) | (d[:-1] * d[1:] < 0))[0]
        for k in crossings:
            if d[k] == 0:
                t = ts[k]
            else:
                t = brentq(lambda tt: float((seg.point(tt) - o) @ n), ts[k], ts[k + 1], xtol=1e-13)
            c = seg.point(t)
            tau = seg.tangent(t)
            t2 = np.array([tau @ ax, tau @ ay])
            out.append(
                CrossSection(
                    seg.name,
                    np.array([(c - o) @ ax, (c - o) @ ay]),
                    c,
                    t2,
                    float(abs(tau @ n)),
                    float(seg.radius_at_arc(seg.arc_length(t))),
                )
            )
    return out


def _grid_mm(shape, mm_per_pixel: float, scale: float = 1.0):
    """In-plane mm coordinates of pixel centres for a grid ``scale`` times coarser than native."""
    h, w = shape
    u = ((np.arange(w) + 0.5) * scale - 0.5) * mm_per_pixel
    v = ((np.arange(h) + 0.5) * scale - 0.5) * mm_per_pixel
    return u, v


def rasterize(sections: Sequence[CrossSection], shape, mm_per_pixel: float, scale: float = 1.0) -> np.ndarray:
    """Boolean lumen mask; ``scale`` > 1 renders a down-sampled grid aligned with area resizing."""
    u, v = _grid_mm(shape, mm_per_pixel, scale)
    mask = np.zeros(shape, dtype=bool)
    cell = mm_per_pixel * scale
    for cs in sections:
        reach = cs.axes_mm[0] if cs.cos_incidence > 0.05 else cs.radius / 0.05
        j0 = max(int(np.floor((cs.center_mm[0] - reach - u[0]) / cell)) - 1, 0)
        j1 = min(int(np.ceil((cs.center_mm[0] + reach - u[0]) / cell)) + 2, shape[1])
        i0 = max(int(np.floor((cs.center_mm[1] - reach - v[0]) / cell)) - 1, 0)
        i1 = min(int(np.ceil((cs.center_mm[1] + reach - v[0]) / cell)) + 2, shape[0])
        if j0 >= j1 or i0 >= i1:
            continue
        X, Y = np.meshgrid(u[j0:j1], v[i0:i1])
        mask[i0:i1, j0:j1] |= cs.contains(X, Y)
    return mask


@dataclass(frozen=True, eq=False)
class UltrasoundFrame:
    pixels: np.ndarray
    timestamp: float = 0.0
    mm_per_pixel: float = DEFAULT_MM_PER_PIXEL
    depth_setting: float = DEFAULT_DEPTH_SETTING
    lumen_mask: np.ndarray | None = None
    sections: tuple = ()
    artifacts: tuple = ()  # (x_mm, y_mm, diameter_mm)

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) <= 0:
            raise ValueError("frame must be a non-empty 2-D grid")
        if self.mm_per_pixel <= 0:
            raise ValueError("mm_per_pixel must be positive")

    @property
    def shape(self):
        return self.pixels.shape


def image_to_ct(ee_pose: RigidTransform, calib: RigidTransform, placement: RigidTransform | None) -> RigidTransform:
    chain = ee_pose @ calib
    if placement is None:
        return chain.relabel(to_frame="ct")
    return placement.inverse() @ chain


def render_frame(
    spec: PhantomSpec,
    ee_pose: RigidTransform,
    calib: RigidTransform,
    noise_seed=0,
    *,
    placement: RigidTransform | None = None,
    shape=DEFAULT_FRAME_SHAPE,
    mm_per_pixel: float = DEFAULT_MM_PER_PIXEL,
    depth_setting: float = DEFAULT_DEPTH_SETTING,
    timestamp: float = 0.0,
) -> UltrasoundFrame:
    """Simulate one B-mode-like frame.

    ``ee_pose`` maps end-effector to robot base, ``calib`` image to
    end-effector, and ``placement`` (default identity) phantom to base.
    Lumen pixels are dark, background is bright Gaussian speckle, and with
    probability ``artifact_rate`` a dark 2-6 mm blob is dropped at least 10 mm
    from every true lumen centre.
    """
    sections = cross_sections(spec, image_to_ct(ee_pose, calib, placement))
    mask = rasterize(sections, shape, mm_per_pixel)
    echo = spec.echo
    rng = np.random.default_rng(noise_seed)
    artifacts = []
    dark = mask.copy()
    if rng.random() < echo.artifact_rate:
        h, w = shape
        diameter = float(rng.uniform(2.0, 6.0))
        centers = np.array([cs.center_mm for cs in sections]).reshape(-1, 2)
        for _ in range(200):
            x = float(rng.uniform(0.0, (w - 1) * mm_per_pixel))
            y = float(rng.uniform(5.0, (h - 1) * mm_per_pixel - 5.0))
            if len(centers) == 0 or np.min(np.hypot(centers[:, 0] - x, centers[:, 1] - y)) >= 10.0:
                artifacts.append((x, y, diameter))
                break
        for x, y, dia in artifacts:
            u, v = _grid_mm(shape, mm_per_pixel)
            X, Y = np.meshgrid(u, v)
            dark |= (X - x) ** 2 + (Y - y) ** 2 < (dia / 2.0) ** 2
    z = rng.standard_normal(shape)
    mean = np.where(dark, echo.lumen_mean, echo.background_mean)
    sigma = np.where(dark, echo.lumen_sigma, echo.background_sigma)
    pixels = np.clip(np.rint(mean + sigma * z), 0, 255).astype(np.uint8)
    return UltrasoundFrame(pixels, timestamp, mm_per_pixel, depth_setting, mask, tuple(sections), tuple(artifacts))


@dataclass(frozen=True, eq=False)
class CalibrationBundle:
    """The four transforms that tie the scan together.

    probe_ee: probe -> end-effector; camera_base: camera -> robot base;
    us_ee: ultrasound image -> end-effector; phantom_ct: physical phantom
    (camera observation) -> CT model.
    """

    probe_ee: RigidTransform
    camera_base: RigidTransform
    us_ee: RigidTransform
    phantom_ct: RigidTransform
    mm_per_pixel: float = DEFAULT_MM_PER_PIXEL
    depth_setting: float = DEFAULT_DEPTH_SETTING

    def ct_to_base(self) -> RigidTransform:
        return self.camera_base @ self.phantom_ct.inverse()

    def to_dict(self) -> dict:
        return {
            "probe_ee": self.probe_ee.to_dict(),
            "camera_base": self.camera_base.to_dict(),
            "us_ee": self.us_ee.to_dict(),
            "phantom_ct": self.phantom_ct.to_dict(),
            "mm_per_pixel": self.mm_per_pixel,
            "depth_setting": self.depth_setting,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationBundle:
        return cls(
            RigidTransform.from_dict(d["probe_ee"]),
            RigidTransform.from_dict(d["camera_base"]),
            RigidTransform.from_dict(d["us_ee"]),
            RigidTransform.from_dict(d["phantom_ct"]),
            float(d.get("mm_per_pixel", DEFAULT_MM_PER_PIXEL)),
            float(d.get("depth_setting", DEFAULT_DEPTH_SETTING)),
        )


def image_to_probe(width_px: int = DEFAULT_FRAME_SHAPE[1], mm_per_pixel: float = DEFAULT_MM_PER_PIXEL) -> RigidTransform:
    """Nominal image -> probe map: image x along probe x, image rows along probe z (depth).

    The top-centre pixel sits at the probe tip.
    """
    R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return RigidTransform(R, [-(width_px / 2.0) * mm_per_pixel, 0.0, 0.0], "us", "probe")


def simple_bundle(mm_per_pixel: float = DEFAULT_MM_PER_PIXEL, width_px: int = DEFAULT_FRAME_SHAPE[1]) -> CalibrationBundle:
    """Bundle with every physical transform at identity (probe flange = probe tip)."""
    probe_ee = RigidTransform.identity("probe", "ee")
    return CalibrationBundle(
        probe_ee,
        RigidTransform.identity("camera", "base"),
        probe_ee @ image_to_probe(width_px, mm_per_pixel),
        RigidTransform.identity("camera", "ct"),
        mm_per_pixel,
    )


@dataclass(frozen=True, eq=False)
class RecordingEntry:
    pose: RigidTransform  # end-effector -> base
    frame: UltrasoundFrame


@dataclass(eq=False)
class ScanRecording:
    entries: list[RecordingEntry]
    calibration_bundle: CalibrationBundle
    ground_truth: Centerline
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a scan recording needs at least one entry")
        ts = np.array([e.frame.timestamp for e in self.entries])
        if np.any(np.diff(ts) <= 0):
            raise ValueError("recording timestamps must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    @property
    def frames(self) -> list[UltrasoundFrame]:
        return [e.frame for e in self.entries]

    @property
    def poses(self) -> list[RigidTransform]:
        return [e.pose for e in self.entries]


def simulate_scan(
    spec: PhantomSpec,
    path,
    calib_bundle: CalibrationBundle,
    *,
    placement: RigidTransform | None = None,
    recorded_bundle: CalibrationBundle | None = None,
    pose_noise: float = 0.0,
    seed: int = 0,
    shape=DEFAULT_FRAME_SHAPE,
    frame_interval: float = FRAME_INTERVAL_S,
    jobs: int = 1,
) -> ScanRecording:
    """Drive the virtual probe along ``path`` and record (pose, frame) pairs.

    Frames are rendered from the commanded pose and the true bundle. The
    recorded pose gets isotropic Gaussian translation noise of ``pose_noise``
    mm, reproducible from ``seed``. ``recorded_bundle`` (e.g. estimated
    calibrations) is stored with the recording instead of the true one.
    """
    waypoints = list(path.waypoints if hasattr(path, "waypoints") else path)
    if not waypoints:
        raise ValueError("probe path is empty")
    ee_from_probe = calib_bundle.probe_ee.inverse()
    commanded = [w @ ee_from_probe for w in waypoints]
    rng = np.random.default_rng([seed, 0x5EED])
    noise = rng.normal(0.0, pose_noise, size=(len(commanded), 3)) if pose_noise > 0 else np.zeros((len(commanded), 3))

    def render(k):
        return render_frame(
            spec,
            commanded[k],
            calib_bundle.us_ee,
            [seed, k],
            placement=placement,
            shape=shape,
            mm_per_pixel=calib_bundle.mm_per_pixel,
            depth_setting=calib_bundle.depth_setting,
            timestamp=round(k * frame_interval, 9),
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            frames = list(pool.map(render, range(len(commanded))))
    else:
        frames = [render(k) for k in range(len(commanded))]
    entries = []
    for k, (pose, frame) in enumerate(zip(commanded, frames)):
        if pose_noise > 0:
            pose = RigidTransform(pose.rotation, pose.translation + noise[k], pose.from_frame, pose.to_frame)
        entries.append(RecordingEntry(pose, frame))
    return ScanRecording(
        entries,
        recorded_bundle or calib_bundle,
        spec.ground_truth,
        {"seed": seed, "pose_noise": pose_noise, "frame_interval": frame_interval},
    )


def write_recording(recording: ScanRecording, directory, comments=()) -> Path:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, e in enumerate(recording.entries):
        name = f"frames/{k:06d}.pgm"
        io.write_pgm(directory / name, e.frame.pixels, comments)
        rows.append({"timestamp": e.frame.timestamp, "pose": e.pose.to_dict()["matrix"], "frame": name})
    io.write_jsonl(directory / "index.jsonl", rows)
    io.write_json(directory / "calib.json", {**recording.calibration_bundle.to_dict(), "meta": recording.metadata})
    gt = recording.ground_truth
    io.write_ply(directory / "ground_truth.ply", gt.cloud(), {"area_mm2": gt.area_mm2}, comments)
    return directory


def read_recording(directory) -> ScanRecording:
    directory = Path(directory)
    calib = io.read_json(directory / "calib.json")
    bundle = CalibrationBundle.from_dict(calib)
    entries = []
    for row in io.read_jsonl(directory / "index.jsonl"):
        pose = RigidTransform.from_matrix(row["pose"], "ee", "base")
        pixels = io.read_pgm(directory / row["frame"])
        entries.append(
            RecordingEntry(pose, UltrasoundFrame(pixels, float(row["timestamp"]), bundle.mm_per_pixel, bundle.depth_setting))
        )
    cloud, scalars = io.read_ply(directory / "ground_truth.ply")
    gt = Centerline(cloud.points, None, scalars.get("area_mm2"), cloud.frame)
    return ScanRecording(entries, bundle, gt, calib.get("meta", {}))
