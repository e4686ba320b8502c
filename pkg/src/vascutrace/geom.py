"""Rigid transforms, plane fitting and rigid point-set alignment.

All lengths are millimetres. Transforms carry frame labels and refuse to
compose when the labels do not chain, which catches most calibration-chain
mistakes at the point where they are made.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DegenerateGeometryError",
    "FrameMismatchError",
    "IcpParams",
    "IcpResult",
    "Plane",
    "PointCloud",
    "RigidTransform",
    "centroid_pca_init",
    "compose",
    "fit_plane",
    "icp",
    "rigid_align",
    "rotation_angle",
    "rotation_about",
]

ORTHO_TOL = 1e-9


class FrameMismatchError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    """Input points do not span enough dimensions for the requested fit."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid map ``x -> R @ x + t`` taking ``from_frame`` into ``to_frame``."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str = "world"
    to_frame: str = "world"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite entries")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, from_frame: str = "world", to_frame: str | None = None) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3), from_frame, from_frame if to_frame is None else to_frame)

    @classmethod
    def from_matrix(cls, matrix, from_frame: str = "world", to_frame: str = "world") -> RigidTransform:
        M = np.asarray(matrix, dtype=float).reshape(4, 4)
        if np.abs(M[3] - [0, 0, 0, 1]).max() > ORTHO_TOL:
            raise ValueError("bottom row of a homogeneous rigid transform must be [0, 0, 0, 1]")
        return cls(M[:3, :3], M[:3, 3], from_frame, to_frame)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0), from_frame="world", to_frame="world"):
        return cls(rotvec_to_matrix(rotvec), translation, from_frame, to_frame)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.to_frame, self.from_frame)

    def apply(self, points) -> np.ndarray:
        """Map an (N, 3) array, or a single 3-vector, through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        if cloud.frame != self.from_frame:
            raise FrameMismatchError(
                f"cloud is in frame {cloud.frame!r} but transform expects {self.from_frame!r}"
            )
        return PointCloud(self.apply(cloud.points), self.to_frame)

    def relabel(self, from_frame: str | None = None, to_frame: str | None = None) -> RigidTransform:
        return RigidTransform(
            self.rotation,
            self.translation,
            self.from_frame if from_frame is None else from_frame,
            self.to_frame if to_frame is None else to_frame,
        )

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def to_dict(self) -> dict:
        return {
            "matrix": [float(v) for v in self.matrix.ravel()],
            "from_frame": self.from_frame,
            "to_frame": self.to_frame,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RigidTransform:
        return cls.from_matrix(data["matrix"], data.get("from_frame", "world"), data.get("to_frame", "world"))

    def __repr__(self):
        return (
            f"RigidTransform({self.from_frame!r} -> {self.to_frame!r}, "
            f"rotvec={np.round(matrix_to_rotvec(self.rotation), 6).tolist()}, "
            f"t={np.round(self.translation, 6).tolist()})"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    if a.from_frame != b.to_frame:
        raise FrameMismatchError(
            f"cannot compose: left transform starts in {a.from_frame!r}, "
            f"right transform ends in {b.to_frame!r}"
        )
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation, b.from_frame, a.to_frame)


def _skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    K = _skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion of Rodrigues
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def matrix_to_rotvec(R) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rotation matrix of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    return rotvec_to_matrix(axis / np.linalg.norm(axis) * angle)


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix; use on ``Ra.T @ Rb`` for errors."""
    c = (np.trace(R) - 1.0) / 2.0
    # arccos loses precision near 0; use the skew part there
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float
    rms: float = 0.0

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that z >= 0, ties broken toward +y then +x."""
    for k in (2, 1, 0):
        if abs(v[k]) > 1e-12:
            return v if v[k] > 0 else -v
    return v


def fit_plane(cloud: PointCloud | np.ndarray) -> Plane:
    """Least-squares plane through a point cloud.

    The normal is the eigenvector of the centred covariance with the
    smallest eigenvalue, oriented with a non-negative z component.
    ``rms`` on the returned plane is the RMS orthogonal residual.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"plane fit needs at least 3 points, got {len(pts)}")
    c = pts.mean(axis=0)
    X = pts - c
    evals, evecs = np.linalg.eigh(X.T @ X)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateGeometryError("points are collinear or coincident; plane is undefined")
    n = _canonical_sign(evecs[:, 0])
    n = n / np.linalg.norm(n)
    rms = float(np.sqrt(max(evals[0], 0.0) / len(pts)))
    return Plane(n, float(n @ c), rms)


def _as_points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=float).reshape(-1, 3)


def _frames(source, target) -> tuple[str, str]:
    sf = source.frame if isinstance(source, PointCloud) else "source"
    tf = target.frame if isinstance(target, PointCloud) else "target"
    return sf, tf


def _kabsch(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cb - R @ ca


def rigid_align(source, target) -> RigidTransform:
    """Closed-form least-squares rigid transform mapping ``source`` onto ``target``.

    Points correspond by index. Reflections are corrected so the result is
    always a proper rotation.
    """
    A, B = _as_points(source), _as_points(target)
    if A.shape != B.shape:
        raise ValueError(f"point counts differ: {len(A)} vs {len(B)}")
    if len(A) < 3:
        raise DegenerateGeometryError(f"rigid alignment needs at least 3 correspondences, got {len(A)}")
    for P in (A, B):
        s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
        if s[1] <= 1e-9 * max(s[0], 1e-300):
            raise DegenerateGeometryError("correspondences are collinear; rotation about their line is unobservable")
    R, t = _kabsch(A, B)
    sf, tf = _frames(source, target)
    return RigidTransform(R, t, sf, tf)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    tolerance: float = 1e-6
    # stop once RMS falls below this, relative change is meaningless at zero
    absolute_tolerance: float = 1e-12


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)

    def __iter__(self):
        # allows ``T, rms = icp(...)``
        return iter((self.transform, self.residual))


def icp(
    source,
    target,
    init: RigidTransform | None = None,
    params: IcpParams | None = None,
) -> IcpResult:
    """Point-to-point ICP with nearest neighbours from a k-d tree over ``target``.

    ``history[k]`` is the RMS nearest-neighbour distance after ``k`` updates;
    it is non-increasing. Running out of iterations is not an error, check
    ``converged``.
    """
    params = params or IcpParams()
    A, B = _as_points(source), _as_points(target)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("ICP needs non-empty source and target clouds")
    sf, tf = _frames(source, target)
    if init is None:
        R, t = np.eye(3), np.zeros(3)
    else:
        if isinstance(source, PointCloud) and init.from_frame != sf:
            raise FrameMismatchError(f"init starts in {init.from_frame!r}, source is in {sf!r}")
        R, t = init.rotation.copy(), init.translation.copy()

    tree = cKDTree(B)
    moved = A @ R.T + t
    dist, idx = tree.query(moved)
    rms = float(np.sqrt(np.mean(dist**2)))
    history = [rms]
    converged = rms <= params.absolute_tolerance
    it = 0
    while not converged and it < params.max_iterations:
        it += 1
        if len(A) >= 3:
            dR, dt = _kabsch(moved, B[idx])
        else:
            dR, dt = np.eye(3), (B[idx] - moved).mean(axis=0)
        R, t = dR @ R, dR @ t + dt
        moved = A @ R.T + t
        dist, idx = tree.query(moved)
        new_rms = float(np.sqrt(np.mean(dist**2)))
        history.append(new_rms)
        converged = (
            new_rms <= params.absolute_tolerance
            or abs(rms - new_rms) <= params.tolerance * max(rms, 1e-300)
        )
        rms = new_rms
    U, _, Vt = np.linalg.svd(R)
    return IcpResult(RigidTransform(U @ Vt, t, sf, tf), rms, it, converged, history)


def _principal_axes(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = P.mean(axis=0)
    evals, evecs = np.linalg.eigh((P - c).T @ (P - c) / len(P))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise DegenerateGeometryError("point cloud covariance is rank-deficient; principal axes are undefined")
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] *= -1
    return c, evecs


def centroid_pca_init(source, target, sign_rule: str = "trace") -> RigidTransform:
    """Coarse alignment from centroids and principal axes (descending variance).

    Each principal axis is only defined up to sign. Of the four sign patterns
    that give a proper rotation, ``sign_rule="trace"`` keeps the one closest to
    the identity (largest trace), which is right when the misalignment is
    below 90 degrees. ``sign_rule="residual"`` keeps the one with the
    smallest nearest-neighbour RMS, for arbitrary relative poses.
    """
    A, B = _as_points(source), _as_points(target)
    if len(A) < 3 or len(B) < 3:
        raise DegenerateGeometryError("principal-axis alignment needs at least 3 points per cloud")
    ca, Ea = _principal_axes(A)
    cb, Eb = _principal_axes(B)
    candidates = []
    for s0, s1 in itertools.product((1.0, -1.0), repeat=2):
        S = np.diag([s0, s1, s0 * s1])
        R = Eb @ S @ Ea.T
        candidates.append(R)
    if sign_rule == "trace":
        R = max(candidates, key=np.trace)
    elif sign_rule == "residual":
        tree = cKDTree(B)

        def score(R):
            d, _ = tree.query((A - ca) @ R.T + cb)
            return float(np.mean(d**2))

        R = min(candidates, key=score)
    else:
        raise ValueError(f"unknown sign_rule {sign_rule!r}")
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    sf, tf = _frames(source, target)
    return RigidTransform(R, cb - R @ ca, sf, tf)


def stack_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    frames = {c.frame for c in clouds}
    if len(frames) != 1:
        raise FrameMismatchError(f"cannot stack clouds from frames {sorted(frames)}")
    return PointCloud(np.vstack([c.points for c in clouds]), frames.pop())


@dataclass(frozen=True, eq=False)
class Centerline:
    """Ordered 3-D polyline with per-point provenance.

    ``frame_index`` is the source ultrasound frame of each point (``-1`` for
    points that do not come from a frame, e.g. ground truth) and ``area_mm2``
    the lumen cross-section area recorded with it.
    """

    points: np.ndarray
    frame_index: np.ndarray | None = None
    area_mm2: np.ndarray | None = None
    frame: str = "world"

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("centerline contains non-finite points")
        n = len(p)
        fi = np.full(n, -1, dtype=int) if self.frame_index is None else np.array(self.frame_index, dtype=int)
        area = np.zeros(n) if self.area_mm2 is None else np.array(self.area_mm2, dtype=float)
        if fi.shape != (n,) or area.shape != (n,):
            raise ValueError("per-point provenance arrays must match the point count")
        if n > 1 and np.any(np.diff(fi) < 0):
            raise ValueError("centerline points must follow scan order (non-decreasing frame index)")
        for a in (p, fi, area):
            a.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "frame_index", fi)
        object.__setattr__(self, "area_mm2", area)

    def __len__(self):
        return len(self.points)

    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.frame)

    def subset(self, keep) -> Centerline:
        keep = np.asarray(keep)
        return Centerline(self.points[keep], self.frame_index[keep], self.area_mm2[keep], self.frame)

    def transformed(self, T: RigidTransform) -> Centerline:
        if T.from_frame != self.frame:
            raise FrameMismatchError(f"centerline is in {self.frame!r}, transform expects {T.from_frame!r}")
        return Centerline(T.apply(self.points), self.frame_index, self.area_mm2, T.to_frame)
