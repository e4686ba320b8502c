"""US image calibration, eye-to-hand calibration and phantom registration.

US calibration images one fixed point from many robot poses. Each
observation gives a pixel ``p_i`` (lifted to mm on the image plane) and an
end-effector pose ``B_i``; with ``X`` the image -> end-effector transform the
world point ``B_i X p_i`` must be the same for every i. ``X`` is estimated by
minimising the pairwise discrepancies over all i < j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import (
    IcpParams,
    PointCloud,
    RigidTransform,
    _skew,
    centroid_pca_init,
    icp,
    matrix_to_rotvec,
    rigid_align,
    rotvec_to_matrix,
)
from .phantom import DEFAULT_DEPTH_SETTING, DEFAULT_MM_PER_PIXEL

MIN_OBSERVATIONS = 6
MIN_ROTATION_SPAN_DEG = 20.0


class CalibrationError(ValueError):
    pass


class ConditioningError(CalibrationError):
    def __init__(self, message: str, spans_deg):
        super().__init__(message)
        self.spans_deg = tuple(float(s) for s in spans_deg)


class ConvergenceError(CalibrationError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class CalibrationObservation:
    robot_pose: RigidTransform  # end-effector -> base
    pixel: tuple[float, float]
    mm_per_pixel: float = DEFAULT_MM_PER_PIXEL
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.image_shape is not None:
            h, w = self.image_shape
            u, v = self.pixel
            if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
                raise ValueError(f"pixel {self.pixel} lies outside a {w}x{h} frame")

    @property
    def point_mm(self) -> np.ndarray:
        return np.array([self.pixel[0] * self.mm_per_pixel, self.pixel[1] * self.mm_per_pixel, 0.0])

    def to_dict(self) -> dict:
        d = {"pose": self.robot_pose.to_dict()["matrix"], "pixel": list(self.pixel), "mm_per_pixel": self.mm_per_pixel}
        if self.image_shape is not None:
            d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationObservation:
        shape = d.get("image_shape")
        return cls(
            RigidTransform.from_matrix(d["pose"], "ee", "base"),
            (float(d["pixel"][0]), float(d["pixel"][1])),
            float(d.get("mm_per_pixel", DEFAULT_MM_PER_PIXEL)),
            tuple(shape) if shape else None,
        )


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    transform: RigidTransform
    rms_residual: float
    observation_count: int
    iterations: int = 0
    depth_setting: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "transform": self.transform.to_dict(),
            "rms_residual": self.rms_residual,
            "observation_count": self.observation_count,
            "iterations": self.iterations,
            **self.extra,
        }
        if self.depth_setting is not None:
            d["depth_setting"] = self.depth_setting
        return d


def rotation_spans_deg(rotations: Sequence[np.ndarray]) -> np.ndarray:
    """Extent (deg) of the pose rotations along each principal axis of their rotation vectors."""
    R0 = rotations[0]
    w = np.array([matrix_to_rotvec(R0.T @ R) for R in rotations])
    if len(w) < 2:
        return np.zeros(3)
    centered = w - w.mean(axis=0)
    _, _, Vt = np.linalg.svd(centered, full_matrices=True)
    proj = centered @ Vt.T
    return np.degrees(np.ptp(proj, axis=0))


def _pairs(n: int):
    i, j = np.triu_indices(n, k=1)
    return i, j


def _pair_residuals(RB, tB, P, R, t, i, j):
    q = P @ R.T + t  # points in end-effector frame
    w = np.einsum("nab,nb->na", RB, q) + tB  # world points
    return (w[i] - w[j]).ravel(), q


def _pair_cost(RB, tB, P, R, t, i, j) -> float:
    r, _ = _pair_residuals(RB, tB, P, R, t, i, j)
    return float(r @ r)


def _linear_translation(RB, tB, P, R, i, j):
    """Best t for a fixed rotation: the pairwise residual is linear in t."""
    A = (RB[i] - RB[j]).reshape(-1, 3)
    wR = np.einsum("nab,nb->na", RB, P @ R.T) + tB
    b = -(wR[i] - wR[j]).ravel()
    t, *_ = np.linalg.lstsq(A, b, rcond=None)
    return t


def _common_point_init(RB, tB, P):
    """Closed-form start: image points have z = 0, so B_i X p_i = w is linear in
    the first two rotation columns, the translation and the world point."""
    n = len(P)
    A = np.zeros((3 * n, 12))
    b = np.zeros(3 * n)
    for k in range(n):
        rows = slice(3 * k, 3 * k + 3)
        A[rows, 0:3] = RB[k] * P[k, 0]
        A[rows, 3:6] = RB[k] * P[k, 1]
        A[rows, 6:9] = RB[k]
        A[rows, 9:12] = -np.eye(3)
        b[rows] = -tB[k]
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    r1, r2 = sol[0:3], sol[3:6]
    M = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def solve_us_calibration(
    observations: Sequence[CalibrationObservation],
    *,
    max_iterations: int = 100,
    tolerance: float = 1e-14,
    depth_setting: float = DEFAULT_DEPTH_SETTING,
    min_span_deg: float = MIN_ROTATION_SPAN_DEG,
) -> CalibrationResult:
    """Estimate the image -> end-effector transform from fixed-point observations.

    Solved by damped Gauss-Newton (Levenberg-Marquardt) on the pairwise
    residuals ``B_i X p_i - B_j X p_j``, rotation updated through an
    axis-angle increment. Two starting points are tried, an identity
    rotation with least-squares translation and a closed-form common-point
    estimate, and the cheaper one is refined.

    Raises
    ------
    ConditioningError
        Fewer than 6 observations, or pose rotations span less than
        ``min_span_deg`` about two independent axes.
    ConvergenceError
        The damped iteration did not settle within ``max_iterations``.
    """
    n = len(observations)
    if n < MIN_OBSERVATIONS:
        raise ConditioningError(f"US calibration needs at least {MIN_OBSERVATIONS} observations, got {n}", (0, 0, 0))
    RB = np.array([o.robot_pose.rotation for o in observations])
    tB = np.array([o.robot_pose.translation for o in observations])
    P = np.array([o.point_mm for o in observations])
    spans = rotation_spans_deg(list(RB))
    if spans[1] < min_span_deg:
        raise ConditioningError(
            f"insufficient pose diversity: rotation spans {np.round(spans, 2).tolist()} deg, "
            f"need >= {min_span_deg:g} deg about two axes",
            spans,
        )
    i, j = _pairs(n)

    starts = []
    for R0 in (np.eye(3), _common_point_init(RB, tB, P)):
        t0 = _linear_translation(RB, tB, P, R0, i, j)
        starts.append((_pair_cost(RB, tB, P, R0, t0, i, j), R0, t0))
    cost, R, t = min(starts, key=lambda s: s[0])

    lam = 1e-3
    converged = cost == 0.0
    it = 0
    while not converged and it < max_iterations:
        it += 1
        r, q = _pair_residuals(RB, tB, P, R, t, i, j)
        # d(B R p)/d(omega) = -R_B [R p]x for a left increment R <- exp(omega) R
        Jw = -np.einsum("nab,nbc->nac", RB, np.array([_skew(v) for v in P @ R.T]))
        Jrot = (Jw[i] - Jw[j]).reshape(-1, 3)
        Jt = (RB[i] - RB[j]).reshape(-1, 3)
        J = np.hstack([Jrot, Jt])
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(30):
            step = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            R_new = rotvec_to_matrix(step[:3]) @ R
            t_new = t + step[3:]
            new_cost = _pair_cost(RB, tB, P, R_new, t_new, i, j)
            if new_cost <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no descent direction left at machine precision
            converged = True
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        R, t, cost = R_new, t_new, new_cost
        lam = max(lam / 10.0, 1e-12)
        if rel < tolerance or cost < 1e-24 or np.linalg.norm(step) < 1e-15:
            converged = True
    if not converged:
        rms = float(np.sqrt(cost / len(i)))
        raise ConvergenceError(f"US calibration did not converge in {max_iterations} iterations (rms {rms:.4g} mm)", rms)
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    rms = float(np.sqrt(_pair_cost(RB, tB, P, R, t, i, j) / len(i)))
    frame_ee = observations[0].robot_pose.from_frame
    return CalibrationResult(
        RigidTransform(R, t, "us", frame_ee),
        rms,
        n,
        it,
        depth_setting,
        {"rotation_spans_deg": [float(s) for s in spans]},
    )


def world_points(observations: Sequence[CalibrationObservation], X: RigidTransform) -> np.ndarray:
    """Fixed-point estimates ``B_i X p_i``, one per observation."""
    return np.array([o.robot_pose.apply(X.apply(o.point_mm)) for o in observations])


def pairwise_rms(points: np.ndarray) -> float:
    i, j = _pairs(len(points))
    d = points[i] - points[j]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def synthetic_us_observations(
    X_true: RigidTransform,
    world_point,
    count: int = 50,
    *,
    seed: int = 0,
    pixel_noise: float = 0.0,
    image_shape=(512, 512),
    mm_per_pixel: float = DEFAULT_MM_PER_PIXEL,
    max_tilt_deg: float = 30.0,
) -> list[CalibrationObservation]:
    """Poses that put ``world_point`` on a random in-bounds pixel.

    The end-effector rotation is a random tilt about a nominal orientation;
    its translation then follows from ``B X p = w``. Pixel noise is added to
    the recorded pixel afterwards (clipped to the frame).
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(world_point, dtype=float)
    h, wd = image_shape
    out = []
    for _ in range(count):
        u = rng.uniform(0.15 * wd, 0.85 * wd)
        v = rng.uniform(0.15 * h, 0.85 * h)
        rv = np.radians(rng.uniform(-max_tilt_deg, max_tilt_deg, size=3))
        R = rotvec_to_matrix(rv)
        q = X_true.apply(np.array([u * mm_per_pixel, v * mm_per_pixel, 0.0]))
        pose = RigidTransform(R, w - R @ q, X_true.to_frame, "base")
        pu = float(np.clip(u + rng.normal(0.0, pixel_noise), 0, wd - 1)) if pixel_noise else float(u)
        pv = float(np.clip(v + rng.normal(0.0, pixel_noise), 0, h - 1)) if pixel_noise else float(v)
        out.append(CalibrationObservation(pose, (pu, pv), mm_per_pixel, tuple(image_shape)))
    return out


def solve_eye_to_hand(tool_points_base, same_points_camera) -> CalibrationResult:
    """Camera -> robot-base transform from corresponded tool-tip points."""
    base = tool_points_base if isinstance(tool_points_base, PointCloud) else PointCloud(tool_points_base, "base")
    cam = same_points_camera if isinstance(same_points_camera, PointCloud) else PointCloud(same_points_camera, "camera")
    T = rigid_align(cam, base)
    resid = T.apply(cam.points) - base.points
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return CalibrationResult(T, rms, len(base))


def checkerboard_points(rows: int = 7, cols: int = 9, square: float = 20.0, origin=(300.0, -80.0, 0.0)) -> np.ndarray:
    """Inner-corner grid of a checkerboard lying flat on the robot table (base frame)."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pts = np.column_stack([c.ravel() * square, r.ravel() * square, np.zeros(r.size)])
    return pts + np.asarray(origin, dtype=float)


def register_phantom(
    model_cloud: PointCloud,
    observed_cloud: PointCloud,
    params: IcpParams | None = None,
    sign_rule: str = "residual",
) -> CalibrationResult:
    """Physical phantom (camera observation) -> CT model transform.

    Coarse alignment from centroids and principal axes, refined by ICP. The
    observed cloud is moved onto the model, so a sparse or partial
    observation always finds true counterparts in the denser model.
    """
    init = centroid_pca_init(observed_cloud, model_cloud, sign_rule=sign_rule)
    res = icp(observed_cloud, model_cloud, init, params)
    return CalibrationResult(
        res.transform,
        res.residual,
        len(observed_cloud),
        res.iterations,
        extra={"converged": res.converged},
    )
