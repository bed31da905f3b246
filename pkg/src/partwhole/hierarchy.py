"""Unsupervised super-parts: groups of geometrically equivalent parts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import aabb_of, chamfer_distance, farthest_point_sample

AABB_TOL = 0.1
CHAMFER_TOL = 0.2
CHAMFER_POINTS = 100


@dataclass(frozen=True)
class SuperPartAssignment:
    part_to_super: tuple[int, ...]
    members: tuple[tuple[int, ...], ...]

    @property
    def num_supers(self) -> int:
        return len(self.members)

    @property
    def num_parts(self) -> int:
        return len(self.part_to_super)

    @classmethod
    def from_members(cls, members: Sequence[Sequence[int]]) -> "SuperPartAssignment":
        members = tuple(tuple(int(i) for i in m) for m in members)
        n = sum(len(m) for m in members)
        part_to_super = [-1] * n
        for s, group in enumerate(members):
            for i in group:
                if not 0 <= i < n or part_to_super[i] != -1:
                    raise ValueError(f"members {members} do not partition range({n})")
                part_to_super[i] = s
        return cls(tuple(part_to_super), members)

    @classmethod
    def singletons(cls, n: int) -> "SuperPartAssignment":
        return cls.from_members([[i] for i in range(n)])

    def ranks(self) -> list[int]:
        """Position of every part inside its own super-part."""
        out = [0] * self.num_parts
        for group in self.members:
            for r, i in enumerate(group):
                out[i] = r
        return out

    def membership_matrix(self) -> np.ndarray:
        """(M, N) 0/1 matrix, row s marks the parts of super-part s."""
        mat = np.zeros((self.num_supers, self.num_parts))
        for i, s in enumerate(self.part_to_super):
            mat[s, i] = 1.0
        return mat

    def to_dict(self) -> dict:
        return {"members": [list(m) for m in self.members]}


class _Equivalence:
    """Lazily evaluated, memoised pairwise equivalence over a fixed list of parts."""

    def __init__(self, parts, aabb_tol, chamfer_tol, chamfer_points):
        self.parts = [np.asarray(getattr(p, "points", p), dtype=np.float64) for p in parts]
        self.extents = [aabb_of(p).extents for p in self.parts]
        self.aabb_tol = aabb_tol
        self.chamfer_tol = chamfer_tol
        self.chamfer_points = chamfer_points
        self._sub: dict[int, np.ndarray] = {}
        self._cache: dict[tuple[int, int], bool] = {}

    def _subsampled(self, i: int) -> np.ndarray:
        if i not in self._sub:
            pts = self.parts[i]
            k = self.chamfer_points
            self._sub[i] = pts if k is None or len(pts) <= k else farthest_point_sample(pts, k, 0)
        return self._sub[i]

    def __call__(self, i: int, j: int) -> bool:
        key = (min(i, j), max(i, j))
        if key not in self._cache:
            if np.max(np.abs(self.extents[i] - self.extents[j])) > self.aabb_tol:
                self._cache[key] = False
            else:
                cd = chamfer_distance(self._subsampled(i), self._subsampled(j))
                self._cache[key] = cd < self.chamfer_tol
        return self._cache[key]


def geometric_equivalence(a, b, aabb_tol: float = AABB_TOL, chamfer_tol: float = CHAMFER_TOL,
                          chamfer_points: int | None = CHAMFER_POINTS) -> bool:
    """True when AABB extents differ by at most ``aabb_tol`` per axis and Chamfer < ``chamfer_tol``.

    Both parts are expected in canonical space. The Chamfer test runs on FPS
    subsets of ``chamfer_points`` points (``None`` compares the full clouds).
    """
    return _Equivalence([a, b], aabb_tol, chamfer_tol, chamfer_points)(0, 1)


def build_super_parts(parts, aabb_tol: float = AABB_TOL, chamfer_tol: float = CHAMFER_TOL,
                      chamfer_points: int | None = CHAMFER_POINTS) -> SuperPartAssignment:
    """Greedy clustering of canonical parts into super-parts.

    Parts are visited in index order. A part joins the first existing cluster
    whose members (seed first) are all equivalent to it; otherwise it opens a
    new cluster. Clusters therefore come out ordered by their lowest part index
    and every pair inside a cluster is equivalent.
    """
    if len(parts) == 0:
        raise ValueError("need at least one part")
    equiv = _Equivalence(parts, aabb_tol, chamfer_tol, chamfer_points)
    clusters: list[list[int]] = []
    for i in range(len(parts)):
        for group in clusters:
            if all(equiv(j, i) for j in group):
                group.append(i)
                break
        else:
            clusters.append([i])
    return SuperPartAssignment.from_members(clusters)


def pairwise_chamfer(parts, chamfer_points: int | None = CHAMFER_POINTS) -> np.ndarray:
    """Symmetric matrix of the Chamfer values the equivalence test uses."""
    equiv = _Equivalence(parts, AABB_TOL, CHAMFER_TOL, chamfer_points)
    n = len(parts)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = chamfer_distance(equiv._subsampled(i), equiv._subsampled(j))
    return out
