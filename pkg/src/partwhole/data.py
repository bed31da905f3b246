"""Shape files, preprocessing into canonical parts, dataset splits and point-cloud export.

Shape file schema (JSON, one shape per file)::

    {
      "shape_id": "table_0003",
      "category": "table",
      "parts": [
        {"points": [x0, y0, z0, x1, ...],          # flat, length 3 * n, n >= 1
         "gt_translation": [tx, ty, tz],
         "gt_quaternion": [r0, r1, r2, r3]},       # unit norm within 1e-5, scalar first
        ...
      ],
      "contacts": [[i, j], ...]                    # optional, adjacent part pairs
    }

``gt_quaternion``/``gt_translation`` place the part's stored points in the
assembled (world) frame: ``world = R(q) p + t``.

Split index file (``splits.json``)::

    {"train": [shape ids], "val": [...], "test": [...]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose6DoF, farthest_point_indices, pca_canonicalize, quaternion_matrix
from .hierarchy import AABB_TOL, CHAMFER_POINTS, CHAMFER_TOL, SuperPartAssignment, build_super_parts
from .metrics import ContactPair, contact_pairs_for

QUAT_TOL = 1e-5
SPLIT_FILE = "splits.json"


class ShapeFormatError(ValueError):
    """Malformed or invalid shape file; the message names the location or field."""


@dataclass
class PartRecord:
    points: np.ndarray
    gt_translation: np.ndarray
    gt_quaternion: np.ndarray


@dataclass
class ShapeRecord:
    shape_id: str
    category: str
    parts: list[PartRecord]
    contacts: list[tuple[int, int]] | None = None

    def validate(self) -> None:
        if not isinstance(self.shape_id, str) or not self.shape_id:
            raise ShapeFormatError("shape_id: must be a non-empty string")
        if not self.parts:
            raise ShapeFormatError("parts: a shape needs at least one part")
        for i, p in enumerate(self.parts):
            where = f"parts[{i}]"
            if p.points.ndim != 2 or p.points.shape[1] != 3 or len(p.points) < 1:
                raise ShapeFormatError(f"{where}.points: expected a non-empty flat list of xyz triples")
            if not np.all(np.isfinite(p.points)):
                raise ShapeFormatError(f"{where}.points: non-finite coordinate")
            if p.gt_translation.shape != (3,) or not np.all(np.isfinite(p.gt_translation)):
                raise ShapeFormatError(f"{where}.gt_translation: expected 3 finite values, got {p.gt_translation.tolist()}")
            if p.gt_quaternion.shape != (4,):
                raise ShapeFormatError(f"{where}.gt_quaternion: expected 4 values, got {p.gt_quaternion.size}")
            if abs(np.linalg.norm(p.gt_quaternion) - 1.0) > QUAT_TOL:
                raise ShapeFormatError(f"{where}.gt_quaternion: norm {np.linalg.norm(p.gt_quaternion):.8f} is not 1")
        for k, pair in enumerate(self.contacts or []):
            i, j = pair
            if i == j or not (0 <= i < len(self.parts) and 0 <= j < len(self.parts)):
                raise ShapeFormatError(f"contacts[{k}]: invalid part pair {list(pair)}")

    def to_dict(self) -> dict:
        out = {
            "shape_id": self.shape_id,
            "category": self.category,
            "parts": [
                {"points": p.points.reshape(-1).tolist(),
                 "gt_translation": p.gt_translation.tolist(),
                 "gt_quaternion": p.gt_quaternion.tolist()}
                for p in self.parts
            ],
        }
        if self.contacts is not None:
            out["contacts"] = [[int(i), int(j)] for i, j in self.contacts]
        return out

    @classmethod
    def from_dict(cls, data) -> "ShapeRecord":
        if not isinstance(data, dict):
            raise ShapeFormatError("top level: expected a JSON object")
        for key in ("shape_id", "parts"):
            if key not in data:
                raise ShapeFormatError(f"{key}: missing required field")
        if not isinstance(data["parts"], list):
            raise ShapeFormatError("parts: expected a list")
        parts = []
        for i, p in enumerate(data["parts"]):
            where = f"parts[{i}]"
            if not isinstance(p, dict):
                raise ShapeFormatError(f"{where}: expected an object")
            for key in ("points", "gt_translation", "gt_quaternion"):
                if key not in p:
                    raise ShapeFormatError(f"{where}.{key}: missing required field")
            try:
                flat = np.asarray(p["points"], dtype=np.float64).reshape(-1)
                trans = np.asarray(p["gt_translation"], dtype=np.float64).reshape(-1)
                quat = np.asarray(p["gt_quaternion"], dtype=np.float64).reshape(-1)
            except (TypeError, ValueError) as exc:
                raise ShapeFormatError(f"{where}: non-numeric value ({exc})") from None
            if flat.size % 3:
                raise ShapeFormatError(f"{where}.points: length {flat.size} is not a multiple of 3")
            parts.append(PartRecord(flat.reshape(-1, 3), trans, quat))
        contacts = data.get("contacts")
        if contacts is not None:
            try:
                contacts = [(int(a), int(b)) for a, b in contacts]
            except (TypeError, ValueError):
                raise ShapeFormatError("contacts: expected a list of [i, j] pairs") from None
        rec = cls(str(data["shape_id"]), str(data.get("category", "")), parts, contacts)
        rec.validate()
        return rec


def dumps_shape(record: ShapeRecord) -> str:
    return json.dumps(record.to_dict())


def save_shape(record: ShapeRecord, path) -> None:
    record.validate()
    Path(path).write_text(dumps_shape(record))


def load_shape(path) -> ShapeRecord:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ShapeFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return ShapeRecord.from_dict(data)
    except ShapeFormatError as exc:
        raise ShapeFormatError(f"{path}: {exc}") from None


def list_shape_files(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json") if p.name != SPLIT_FILE)


def load_directory(directory, split: str | None = None) -> list[ShapeRecord]:
    """All shapes in a directory, optionally only those listed under ``split`` in splits.json."""
    records = [load_shape(p) for p in list_shape_files(directory)]
    if split in (None, "all"):
        return records
    index = json.loads((Path(directory) / SPLIT_FILE).read_text())
    if split not in index:
        raise KeyError(f"split {split!r} not in {sorted(index)}")
    wanted = set(index[split])
    return [r for r in records if r.shape_id in wanted]


# -- preprocessing ---------------------------------------------------------------
@dataclass
class AssemblyShape:
    """A preprocessed shape: canonical parts plus ground-truth poses."""

    shape_id: str
    category: str
    points: np.ndarray                  # (N, d, 3) canonical
    gt_translations: np.ndarray         # (N, 3)
    gt_quaternions: np.ndarray          # (N, 4)
    assignment: SuperPartAssignment
    contacts: list[ContactPair] = field(default_factory=list)

    @property
    def num_parts(self) -> int:
        return len(self.points)

    def gt_poses(self) -> list[Pose6DoF]:
        return [Pose6DoF(t, q) for t, q in zip(self.gt_translations, self.gt_quaternions)]

    def assembled(self) -> np.ndarray:
        """(N, d, 3) parts placed by their ground-truth poses."""
        rot = quaternion_matrix(self.gt_quaternions)
        return np.einsum("npk,njk->npj", self.points, rot) + self.gt_translations[:, None, :]


def resample_part(points: np.ndarray, k: int) -> np.ndarray:
    """Exactly ``k`` points: cyclic duplication up to ``k`` if short, then FPS from index 0."""
    if len(points) < 2:
        raise ShapeFormatError("cannot canonicalise a part with fewer than 2 points")
    if len(points) < k:
        points = np.resize(points, (k, 3))
    return points[farthest_point_indices(points, k, 0)]


def preprocess(record: ShapeRecord, points_per_part: int = 1000, adjacency_eps: float = 0.01,
               aabb_tol: float = AABB_TOL, chamfer_tol: float = CHAMFER_TOL,
               chamfer_points: int | None = CHAMFER_POINTS) -> AssemblyShape:
    """FPS-resample and PCA-canonicalise every part, re-expressing its GT pose.

    If the stored part is ``p`` with GT pose ``G`` and PCA gives ``p = F c``,
    the canonical part ``c`` gets the pose ``G F`` so the world placement is unchanged.
    """
    record.validate()
    canon, trans, quats = [], [], []
    for i, part in enumerate(record.parts):
        if len(np.unique(part.points, axis=0)) < 2:
            raise ShapeFormatError(f"parts[{i}].points: degenerate part (single distinct point)")
        sampled = resample_part(part.points, points_per_part)
        c, frame = pca_canonicalize(sampled)
        pose = Pose6DoF(part.gt_translation, part.gt_quaternion / np.linalg.norm(part.gt_quaternion)).compose(frame)
        canon.append(c)
        trans.append(pose.translation)
        quats.append(pose.quaternion)
    points = np.stack(canon)
    assignment = build_super_parts(list(points), aabb_tol, chamfer_tol, chamfer_points)
    shape = AssemblyShape(record.shape_id, record.category, points, np.array(trans), np.array(quats), assignment)
    shape.contacts = contact_pairs_for(shape.points, shape.gt_translations, shape.gt_quaternions,
                                       adjacency_eps=adjacency_eps, pairs=record.contacts)
    return shape


# -- splits ------------------------------------------------------------------------
def split_dataset(records: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle, then cut into train/val/test by ``ratios``."""
    if len(records) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    items = [records[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


def write_split_index(directory, train, val, test) -> Path:
    path = Path(directory) / SPLIT_FILE
    index = {name: [r.shape_id for r in group] for name, group in (("train", train), ("val", val), ("test", test))}
    path.write_text(json.dumps(index, indent=2))
    return path


# -- export -------------------------------------------------------------------------
def export_ply(path, parts: Sequence[np.ndarray]) -> None:
    """ASCII PLY, vertices only; each vertex carries its part index."""
    total = sum(len(p) for p in parts)
    lines = ["ply", "format ascii 1.0"]
    start = 0
    for i, p in enumerate(parts):
        lines.append(f"comment part {i} vertices {start}-{start + len(p) - 1}")
        start += len(p)
    lines += [f"element vertex {total}", "property float x", "property float y", "property float z",
              "property int part_index", "end_header"]
    for i, p in enumerate(parts):
        lines.extend(f"{x:.6f} {y:.6f} {z:.6f} {i}" for x, y, z in p)
    Path(path).write_text("\n".join(lines) + "\n")


def export_obj(path, parts: Sequence[np.ndarray]) -> None:
    """Wavefront OBJ, vertices only, one object per part."""
    lines = []
    for i, p in enumerate(parts):
        lines.append(f"# part {i}")
        lines.append(f"o part_{i}")
        lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in p)
    Path(path).write_text("\n".join(lines) + "\n")
