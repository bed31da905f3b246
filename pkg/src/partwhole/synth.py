"""Procedural tables, chairs and lamps built from cuboid and cylinder point clouds.

Every part is stored in a randomly rotated local frame together with the
exact pose that places it in the assembly; adjacency is known by construction.
Assemblies are recentred and scaled so all points lie in [-0.9, 0.9]^3.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .data import PartRecord, ShapeRecord

FIT = 0.9

# (lo, hi) ranges in pre-normalisation units
DEFAULT_DIMS = {
    "table": {
        "top_width": (1.2, 1.6), "top_depth": (0.7, 1.0), "top_thickness": (0.05, 0.09),
        "leg_height": (0.6, 0.85), "leg_size": (0.06, 0.1), "leg_inset": (0.02, 0.08),
        "stretcher_height": (0.15, 0.3),
    },
    "chair": {
        "seat_width": (0.45, 0.6), "seat_depth": (0.45, 0.6), "seat_thickness": (0.05, 0.08),
        "leg_height": (0.4, 0.5), "leg_size": (0.04, 0.06), "back_height": (0.4, 0.6),
        "back_thickness": (0.04, 0.07), "arm_height": (0.15, 0.25),
    },
    "lamp": {
        "base_radius": (0.2, 0.3), "base_height": (0.04, 0.07), "pole_radius": (0.02, 0.04),
        "pole_height": (0.6, 0.9), "shade_radius": (0.2, 0.35), "shade_height": (0.2, 0.3),
        "cap_size": (0.05, 0.1),
    },
}
PART_COUNTS = {"table": (5, 7), "chair": (6, 8), "lamp": (3, 4)}


@dataclass
class SynthSpec:
    category: str = "table"
    num_shapes: int = 20
    seed: int = 0
    part_count: tuple | int | None = None
    points_per_part: int = 1000
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in DEFAULT_DIMS:
            raise ValueError(f"category: unknown template {self.category!r}, expected one of {sorted(DEFAULT_DIMS)}")
        if self.part_count is None:
            self.part_count = (min(PART_COUNTS[self.category]), max(PART_COUNTS[self.category]))
        elif isinstance(self.part_count, (int, np.integer)):
            self.part_count = (self.part_count, self.part_count)
        if len(self.part_count) != 2:
            raise ValueError(f"part_count: expected an int or a (lo, hi) pair, got {self.part_count}")
        self.part_count = tuple(int(v) for v in self.part_count)
        self.validate()

    def validate(self) -> None:
        if int(self.num_shapes) < 1:
            raise ValueError(f"num_shapes: must be >= 1, got {self.num_shapes}")
        if int(self.points_per_part) < 2:
            raise ValueError(f"points_per_part: must be >= 2, got {self.points_per_part}")
        lo, hi = self.part_count
        if lo < 2 or lo > hi:
            raise ValueError(f"part_count: need 2 <= lo <= hi, got {self.part_count}")
        if not self.allowed_counts():
            raise ValueError(f"part_count: {self.part_count} excludes every {self.category} layout "
                             f"{PART_COUNTS[self.category]}")
        for name, rng in self.dims.items():
            if name not in DEFAULT_DIMS[self.category]:
                raise ValueError(f"dims.{name}: unknown dimension for {self.category}")
            if len(rng) != 2 or not 0 < float(rng[0]) <= float(rng[1]):
                raise ValueError(f"dims.{name}: need 0 < lo <= hi, got {rng}")

    def allowed_counts(self) -> list[int]:
        lo, hi = self.part_count
        return [c for c in PART_COUNTS[self.category] if lo <= c <= hi]

    def ranges(self) -> dict:
        out = dict(DEFAULT_DIMS[self.category])
        out.update({k: tuple(v) for k, v in self.dims.items()})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown field, expected one of {sorted(cls.__dataclass_fields__)}")
        return cls(**data)


# -- primitives -------------------------------------------------------------------
def sample_cuboid(size, n: int, rng) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box centred at the origin."""
    size = np.asarray(size, dtype=np.float64)
    half = size / 2
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def sample_cylinder(radius: float, height: float, n: int, rng) -> np.ndarray:
    """Uniform samples on a closed cylinder along y centred at the origin."""
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    y = np.where(kind == 0, rng.uniform(-height / 2, height / 2, n), np.where(kind == 1, -height / 2, height / 2))
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


class _Builder:
    def __init__(self, n_points: int, rng):
        self.n = n_points
        self.rng = rng
        self.parts: list[tuple[np.ndarray, np.ndarray]] = []   # (centred points, centre)
        self.contacts: list[tuple[int, int]] = []

    def cuboid(self, size, center) -> int:
        self.parts.append((sample_cuboid(size, self.n, self.rng), np.asarray(center, dtype=np.float64)))
        return len(self.parts) - 1

    def cylinder(self, radius, height, center) -> int:
        self.parts.append((sample_cylinder(radius, height, self.n, self.rng), np.asarray(center, dtype=np.float64)))
        return len(self.parts) - 1

    def touch(self, i: int, j: int) -> None:
        self.contacts.append((i, j))

    def record(self, shape_id: str, category: str) -> ShapeRecord:
        world = np.concatenate([p + c for p, c in self.parts])
        lo, hi = world.min(axis=0), world.max(axis=0)
        mid = (lo + hi) / 2
        scale = FIT / np.max(np.abs(world - mid))
        parts = []
        for pts, center in self.parts:
            rot = Rotation.random(random_state=self.rng)
            x, y, z, w = rot.as_quat()
            local = (pts * scale) @ rot.as_matrix()       # R^T applied row-wise
            parts.append(PartRecord(local, (center - mid) * scale, np.array([w, x, y, z])))
        return ShapeRecord(shape_id, category, parts, list(self.contacts))


def _draw(ranges, rng) -> dict:
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}


def _table(b: _Builder, d: dict, count: int) -> None:
    w, dep, t = d["top_width"], d["top_depth"], d["top_thickness"]
    h, s, inset = d["leg_height"], d["leg_size"], d["leg_inset"]
    top = b.cuboid((w, t, dep), (0, h + t / 2, 0))
    xs = w / 2 - inset - s / 2
    zs = dep / 2 - inset - s / 2
    legs = [b.cuboid((s, h, s), (sx * xs, h / 2, sz * zs)) for sz in (-1, 1) for sx in (-1, 1)]
    for leg in legs:
        b.touch(top, leg)
    if count >= 7:
        thick = 0.6 * s
        length = 2 * zs - s
        y = d["stretcher_height"] * h
        for k, sx in enumerate((-1, 1)):
            bar = b.cuboid((thick, thick, length), (sx * xs, y, 0))
            b.touch(bar, legs[k])
            b.touch(bar, legs[k + 2])


def _chair(b: _Builder, d: dict, count: int) -> None:
    w, dep, t = d["seat_width"], d["seat_depth"], d["seat_thickness"]
    h, s = d["leg_height"], d["leg_size"]
    hb, tb = d["back_height"], d["back_thickness"]
    seat = b.cuboid((w, t, dep), (0, h + t / 2, 0))
    back = b.cuboid((w, hb, tb), (0, h + t + hb / 2, -dep / 2 + tb / 2))
    b.touch(seat, back)
    xs, zs = w / 2 - s / 2, dep / 2 - s / 2
    for sz in (-1, 1):
        for sx in (-1, 1):
            b.touch(seat, b.cuboid((s, h, s), (sx * xs, h / 2, sz * zs)))
    if count >= 8:
        ha = d["arm_height"]
        length = dep - tb
        for sx in (-1, 1):
            arm = b.cuboid((s, ha, length), (sx * (w / 2 - s / 2), h + t + ha / 2, -dep / 2 + tb + length / 2))
            b.touch(seat, arm)
            b.touch(back, arm)


def _lamp(b: _Builder, d: dict, count: int) -> None:
    hb, hp, hs = d["base_height"], d["pole_height"], d["shade_height"]
    base = b.cylinder(d["base_radius"], hb, (0, hb / 2, 0))
    pole = b.cylinder(d["pole_radius"], hp, (0, hb + hp / 2, 0))
    shade = b.cylinder(d["shade_radius"], hs, (0, hb + hp + hs / 2, 0))
    b.touch(base, pole)
    b.touch(pole, shade)
    if count >= 4:
        c = d["cap_size"]
        b.touch(shade, b.cuboid((c, c, c), (0, hb + hp + hs + c / 2, 0)))


_TEMPLATES = {"table": _table, "chair": _chair, "lamp": _lamp}


def generate_synthetic(spec: SynthSpec) -> list[ShapeRecord]:
    """Deterministic list of ``spec.num_shapes`` shapes for ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ranges = spec.ranges()
    counts = spec.allowed_counts()
    out = []
    for i in range(int(spec.num_shapes)):
        dims = _draw(ranges, rng)
        count = int(counts[rng.integers(len(counts))])
        builder = _Builder(int(spec.points_per_part), rng)
        _TEMPLATES[spec.category](builder, dims, count)
        out.append(builder.record(f"{spec.category}_{i:04d}", spec.category))
    return out
