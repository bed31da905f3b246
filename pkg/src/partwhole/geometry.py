"""Geometry kernels: Chamfer distance, FPS, PCA frames, quaternions and rigid poses.

Quaternions are stored scalar-first, ``(r0, r1, r2, r3) = (w, x, y, z)``.
Every function here is pure and works on plain numpy arrays of shape ``(n, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

UNIT_TOL = 1e-6
# below this many candidate pairs a dense distance matrix beats building a tree
_BRUTE_FORCE_PAIRS = 1 << 16


@dataclass(frozen=True)
class PartPointCloud:
    points: np.ndarray
    part_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError(f"part {self.part_index}: points must be (d>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"part {self.part_index}: non-finite coordinates")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min


@dataclass
class Pose6DoF:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64).reshape(4)

    def check(self, bounded: bool = True) -> None:
        """Raise ValueError unless the quaternion is unit and (optionally) |t_k| < 1."""
        check_unit_quaternion(self.quaternion)
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation is not finite")
        if bounded and np.any(np.abs(self.translation) >= 1.0):
            raise ValueError(f"translation {self.translation} outside (-1, 1)")

    def rotation(self) -> np.ndarray:
        return rodrigues(self.quaternion)

    def inverse(self) -> "Pose6DoF":
        # x = R y + t  =>  y = R^T x - R^T t
        rot = self.rotation()
        return Pose6DoF(-rot.T @ self.translation, quaternion_conjugate(self.quaternion))

    def compose(self, inner: "Pose6DoF") -> "Pose6DoF":
        """Pose equivalent to applying ``inner`` first, then ``self``."""
        rot = self.rotation()
        return Pose6DoF(rot @ inner.translation + self.translation,
                        quaternion_multiply(self.quaternion, inner.quaternion))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.quaternion])


def _as_points(p) -> np.ndarray:
    pts = np.asarray(getattr(p, "points", p), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[-1] != 3:
        raise ValueError(f"expected an (n, 3) point set, got shape {pts.shape}")
    return pts


# -- nearest neighbours and Chamfer ------------------------------------------
def nearest_neighbors(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance and index of the nearest ``dst`` point for every ``src`` point."""
    if len(src) * len(dst) <= _BRUTE_FORCE_PAIRS:
        diff = src[:, None, :] - dst[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(len(src)), idx], idx
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.einsum("ij,ij->i", diff, diff), idx


def _check_sets(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_points(x), _as_points(y)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer distance of an empty point set is undefined")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("chamfer distance needs finite coordinates")
    return x, y


def chamfer_distance(x, y) -> float:
    """Symmetric Chamfer distance with each direction averaged over its source set.

    ``mean_x min_y |x-y|^2 + mean_y min_x |x-y|^2``.
    """
    x, y = _check_sets(x, y)
    dxy, _ = nearest_neighbors(x, y)
    dyx, _ = nearest_neighbors(y, x)
    return float(dxy.mean() + dyx.mean())


def chamfer_distance_sum(x, y) -> float:
    """Un-normalised variant: both directional terms summed instead of averaged."""
    x, y = _check_sets(x, y)
    dxy, _ = nearest_neighbors(x, y)
    dyx, _ = nearest_neighbors(y, x)
    return float(dxy.sum() + dyx.sum())


# -- quaternions and rotations -----------------------------------------------
def check_unit_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = np.linalg.norm(q, axis=-1)
    if not np.all(np.abs(norm - 1.0) <= UNIT_TOL):
        raise ValueError(f"quaternion norm {norm} is not 1 within {UNIT_TOL}")
    return q


def quaternion_matrix(q) -> np.ndarray:
    """Rotation matrices for a batch ``(..., 4)`` of unit quaternions, no validation."""
    q = np.asarray(q)
    r0, r1, r2, r3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * r2 * r2 - 2 * r3 * r3, 2 * r1 * r2 - 2 * r0 * r3, 2 * r1 * r3 + 2 * r0 * r2],
        [2 * r1 * r2 + 2 * r0 * r3, 1 - 2 * r1 * r1 - 2 * r3 * r3, 2 * r2 * r3 - 2 * r0 * r1],
        [2 * r1 * r3 - 2 * r0 * r2, 2 * r2 * r3 + 2 * r0 * r1, 1 - 2 * r1 * r1 - 2 * r2 * r2],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rodrigues(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion ``(r0, r1, r2, r3)``."""
    q = check_unit_quaternion(q).reshape(4)
    return quaternion_matrix(q)


def quaternion_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quaternion_multiply(a, b) -> np.ndarray:
    a0, a1, a2, a3 = np.asarray(a, dtype=np.float64)
    b0, b1, b2, b3 = np.asarray(b, dtype=np.float64)
    return np.array([
        a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
        a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
        a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
        a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
    ])


def quaternion_from_matrix(rot) -> np.ndarray:
    """Unit quaternion (scalar first, r0 >= 0) of a proper rotation matrix."""
    x, y, z, w = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def random_quaternion(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (4,) if size is None else (size, 4)
    q = rng.standard_normal(shape)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# -- rigid motion ------------------------------------------------------------
def apply_pose(points, pose: Pose6DoF) -> np.ndarray:
    """Map every point ``x`` to ``R x + t``; order and count are preserved."""
    pts = _as_points(points)
    pose.check(bounded=False)
    return pts @ rodrigues(pose.quaternion).T + pose.translation


# -- sampling ----------------------------------------------------------------
def farthest_point_indices(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; distance ties go to the lowest index."""
    pts = _as_points(points)
    n = len(pts)
    if k > n or k < 1:
        raise ValueError(f"cannot sample k={k} points from a set of {n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = seed_index
    diff = pts - pts[seed_index]
    dist = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(dist, np.einsum("ij,ij->i", diff, diff), out=dist)
    return chosen


def farthest_point_sample(points, k: int, seed_index: int = 0) -> np.ndarray:
    pts = _as_points(points)
    return pts[farthest_point_indices(pts, k, seed_index)]


# -- canonical frames --------------------------------------------------------
def _principal_axes(centered: np.ndarray) -> np.ndarray:
    cov = centered.T @ centered / len(centered)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(np.max(np.abs(evals))), 1e-300)
    # descending eigenvalue; (near-)equal eigenvalues ordered by the axis each vector mostly points along
    keys = [(-round(float(evals[i]) / scale, 9), int(np.argmax(np.abs(evecs[:, i])))) for i in range(3)]
    order = sorted(range(3), key=lambda i: keys[i])
    axes = evecs[:, order].copy()
    for j in range(3):
        proj = centered @ axes[:, j]
        skew = float(np.sum(proj ** 3))
        if abs(skew) > 1e-9 * float(np.sum(np.abs(proj) ** 3)) + 1e-300:
            if skew < 0:
                axes[:, j] *= -1
        else:
            nz = axes[np.abs(axes[:, j]) > 1e-12, j]
            if len(nz) and nz[0] < 0:
                axes[:, j] *= -1
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1
    return axes


def pca_canonicalize(points) -> tuple[np.ndarray, Pose6DoF]:
    """Centre the cloud and align its principal axes to x, y, z (largest variance first).

    Returns ``(canonical_points, frame)`` where ``apply_pose(canonical_points, frame)``
    reproduces the input. Axis signs make the third moment along each axis
    non-negative (symmetric directions fall back to a positive first non-zero
    component); the last axis is flipped if needed so the frame is a rotation.
    """
    pts = _as_points(points)
    center = pts.mean(axis=0)
    centered = pts - center
    axes = _principal_axes(centered)
    frame = Pose6DoF(center, quaternion_from_matrix(axes))
    return centered @ axes, frame


def aabb_of(points) -> Aabb:
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("bounding box of an empty point set is undefined")
    return Aabb(pts.min(axis=0), pts.max(axis=0))
