"""Point clouds, rigid transforms and correspondence sets.

Points are stored as ``(n, 3)`` float64 arrays in meters. All containers
are immutable once built: their arrays are copied and marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateError, InputError

ROTATION_TOL = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"expected an (n, 3) array of points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with optional 8-bit RGB colors."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.colors is not None:
            cols = np.asarray(self.colors)
            if cols.size == 0:
                cols = np.zeros((0, 3), dtype=np.uint8)
            if cols.shape != pts.shape:
                raise InputError(
                    f"colors shape {cols.shape} does not match points shape {pts.shape}"
                )
            if np.any(cols < 0) or np.any(cols > 255):
                raise InputError("colors must lie in 0..255")
            object.__setattr__(self, "colors", _frozen(cols, np.uint8))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, colored: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if colored else None)

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        """Join clouds in order. Colors survive only if every input has them."""
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds], axis=0)
        else:
            cols = None
        return cls(pts, cols)

    def select(self, index) -> "PointCloud":
        cols = None if self.colors is None else self.colors[index]
        return PointCloud(self.points[index], cols)


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians.

    Uses ``atan2`` on the skew and trace parts, which stays accurate for
    angles near zero where ``arccos`` loses half the digits.
    """
    r = np.asarray(rotation, dtype=np.float64)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(r) - 1.0)))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def polar_orthonormalize(matrix) -> np.ndarray:
    """Closest proper rotation to ``matrix`` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation, acting as ``p -> R p + t``.

    The constructor validates orthonormality and ``det(R) = +1`` to
    ``ROTATION_TOL``. It never repairs a bad matrix on its own; pass
    ``orthonormalize=True`` to project onto SO(3) explicitly.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orthonormalize: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InputError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InputError("transform contains non-finite values")
        if self.orthonormalize:
            r = polar_orthonormalize(r)
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > ROTATION_TOL:
            raise InputError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > ROTATION_TOL:
            raise InputError(f"rotation determinant is {det:.12f}, expected +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix, orthonormalize: bool = False) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise InputError(f"homogeneous matrix must be 4x4, got {m.shape}")
        if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > ROTATION_TOL:
            raise InputError("homogeneous matrix bottom row must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3], orthonormalize=orthonormalize)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = _as_points(points)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Map every point of ``cloud`` through ``transform``; colors are kept."""
    if len(cloud) == 0:
        return cloud
    return PointCloud(transform.apply(cloud.points), cloud.colors)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    # products of valid rotations drift by a few ulps only
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired points ``source`` (previous view) and ``target`` (current view).

    ``weights`` holds one non-negative weight per pair; it defaults to ones.
    """

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        src = _as_points(self.source)
        tgt = _as_points(self.target)
        if src.shape != tgt.shape:
            raise InputError(
                f"source has {src.shape[0]} points but target has {tgt.shape[0]}"
            )
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
            raise InputError("correspondences contain non-finite coordinates")
        w = np.ones(src.shape[0]) if self.weights is None else np.asarray(
            self.weights, dtype=np.float64
        ).reshape(-1)
        if w.shape[0] != src.shape[0]:
            raise InputError(
                f"{w.shape[0]} weights given for {src.shape[0]} correspondences"
            )
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise InputError("weights must be finite and non-negative")
        object.__setattr__(self, "source", _frozen(src))
        object.__setattr__(self, "target", _frozen(tgt))
        object.__setattr__(self, "weights", _frozen(w))

    def __len__(self) -> int:
        return self.source.shape[0]

    def with_weights(self, weights) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source, self.target, weights)

    def select(self, index) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.source[index], self.target[index], self.weights[index]
        )


def rmse(correspondences: CorrespondenceSet, transform: RigidTransform) -> float:
    """Unweighted root mean squared residual ``target - T(source)``."""
    m = len(correspondences)
    if m == 0:
        raise DegenerateError("rmse of an empty correspondence set")
    residual = correspondences.target - transform.apply(correspondences.source)
    return float(np.sqrt(np.sum(residual * residual) / m))
