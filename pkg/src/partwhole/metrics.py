"""Assembly quality and diversity metrics.

All functions take plain numpy arrays: canonical parts ``(N, d, 3)``,
translations ``(N, 3)`` and scalar-first unit quaternions ``(N, 4)``.
Accuracies are percentages in [0, 100].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import chamfer_distance, nearest_neighbors, quaternion_matrix

THRESHOLDS = (0.01, 0.02, 0.03, 0.04, 0.05)
TAU_Q = 0.5
ADJACENCY_EPS = 0.01


@dataclass(frozen=True)
class MetricThresholds:
    tau_p: tuple = THRESHOLDS
    tau_c: tuple = THRESHOLDS
    tau_q: float = TAU_Q


@dataclass(frozen=True)
class ContactPair:
    part_i: int
    part_j: int
    c_ij: np.ndarray   # on part i, canonical frame of part i
    c_ji: np.ndarray   # on part j, canonical frame of part j


def place_parts(points: np.ndarray, translations, quaternions) -> np.ndarray:
    """Apply per-part rigid poses: returns ``(N, d, 3)``."""
    rot = quaternion_matrix(np.asarray(quaternions, dtype=np.float64))
    return np.einsum("npk,njk->npj", points, rot) + np.asarray(translations)[:, None, :]


def _flatten(parts) -> np.ndarray:
    return np.concatenate([np.asarray(p).reshape(-1, 3) for p in parts], axis=0)


def shape_chamfer(pred_assembly, gt_assembly) -> float:
    """Chamfer distance between whole assemblies (lists/arrays of posed parts)."""
    return chamfer_distance(_flatten(pred_assembly), _flatten(gt_assembly))


def part_chamfers(points, pred_t, pred_q, gt_t, gt_q) -> np.ndarray:
    pred = place_parts(points, pred_t, pred_q)
    gt = place_parts(points, gt_t, gt_q)
    return np.array([chamfer_distance(a, b) for a, b in zip(pred, gt)])


def part_accuracy(points, pred_t, pred_q, gt_t, gt_q, tau_p: float) -> float:
    if tau_p <= 0:
        raise ValueError("tau_p must be positive")
    return float(100.0 * np.mean(part_chamfers(points, pred_t, pred_q, gt_t, gt_q) < tau_p))


def extract_contact_pairs(points, gt_t, gt_q, adjacency_eps: float = ADJACENCY_EPS) -> list[ContactPair]:
    """Contact pairs of every part pair closer than ``adjacency_eps`` in the GT assembly."""
    return contact_pairs_for(points, gt_t, gt_q, adjacency_eps=adjacency_eps)


def contact_pairs_for(points, gt_t, gt_q, adjacency_eps: float = ADJACENCY_EPS,
                      pairs: Sequence[tuple[int, int]] | None = None) -> list[ContactPair]:
    """Shared contact point of adjacent parts, expressed in each part's canonical frame.

    The contact point is the midpoint of the closest point pair in the GT assembly,
    so GT poses map both local copies onto the same world point.

    ``pairs`` fixes the adjacency explicitly; otherwise every pair whose minimum
    inter-part distance in the GT assembly is below ``adjacency_eps`` counts.
    """
    points = np.asarray(points, dtype=np.float64)
    world = place_parts(points, gt_t, gt_q)
    rot = quaternion_matrix(np.asarray(gt_q, dtype=np.float64))
    t = np.asarray(gt_t, dtype=np.float64)
    n = len(points)
    if pairs is None:
        candidates = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        candidates = sorted({(min(i, j), max(i, j)) for i, j in pairs})
    out = []
    for i, j in candidates:
        d2, idx = nearest_neighbors(world[i], world[j])
        a = int(np.argmin(d2))
        if pairs is None and not np.sqrt(d2[a]) < adjacency_eps:
            continue
        mid = 0.5 * (world[i, a] + world[j, int(idx[a])])
        out.append(ContactPair(i, j, rot[i].T @ (mid - t[i]), rot[j].T @ (mid - t[j])))
    return out


def connectivity_accuracy(pred_t, pred_q, contacts: Sequence[ContactPair], tau_c: float) -> float:
    """Percentage of contact pairs whose posed contact points are within ``tau_c`` (squared distance).

    A shape without contact pairs scores 100.
    """
    if not contacts:
        return 100.0
    rot = quaternion_matrix(np.asarray(pred_q, dtype=np.float64))
    t = np.asarray(pred_t, dtype=np.float64)
    hits = 0
    for c in contacts:
        pi = rot[c.part_i] @ c.c_ij + t[c.part_i]
        pj = rot[c.part_j] @ c.c_ji + t[c.part_j]
        hits += float(np.sum((pi - pj) ** 2)) < tau_c
    return 100.0 * hits / len(contacts)


def mean_accuracy(curve: dict, thresholds: Sequence[float] = THRESHOLDS) -> float:
    """Arithmetic mean of a threshold -> accuracy curve over the full threshold set."""
    missing = [t for t in thresholds if t not in curve]
    if missing:
        raise KeyError(f"accuracy curve lacks thresholds {missing}")
    return float(np.mean([curve[t] for t in thresholds]))


def diversity_scores(assemblies: Sequence, ca_fractions: Sequence[float], tau_q: float = TAU_Q):
    """(DS, QDS, WQDS) over K assemblies of one part set.

    ``ca_fractions`` are connectivity accuracies in [0, 1]. A pair contributes
    to QDS only if both CAs exceed ``tau_q``; WQDS also weights it by CA_i * CA_j.
    """
    k = len(assemblies)
    if k == 0 or len(ca_fractions) != k:
        raise ValueError("need one CA value per assembly and at least one assembly")
    flat = [_flatten(a) if np.asarray(a).ndim == 3 else np.asarray(a) for a in assemblies]
    ca = np.asarray(ca_fractions, dtype=np.float64)
    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            dist[i, j] = dist[j, i] = chamfer_distance(flat[i], flat[j])
    ok = (ca > tau_q).astype(np.float64)
    ds = dist.sum() / k ** 2
    qds = (dist * np.outer(ok, ok)).sum() / k ** 2
    wqds = (dist * np.outer(ok * ca, ok * ca)).sum() / k ** 2
    return float(ds), float(qds), float(wqds)


def select_closest_variant(variant_assemblies: Sequence, gt_assembly) -> int:
    """Index of the variant with the smallest shape Chamfer to GT (first on ties)."""
    if len(variant_assemblies) == 0:
        raise ValueError("no variants to select from")
    scores = [shape_chamfer(v, gt_assembly) for v in variant_assemblies]
    return int(np.argmin(scores))


# -- per-shape report ------------------------------------------------------------
@dataclass
class MetricReport:
    shape_id: str
    scd: float
    pa: dict
    ca: dict
    mpa: float
    mca: float
    ds: float
    qds: float
    wqds: float
    selected_variant: int = 0
    num_variants: int = 1
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)

    def row(self) -> list:
        return ([self.shape_id, self.scd] + [self.pa[t] for t in self.thresholds.tau_p]
                + [self.ca[t] for t in self.thresholds.tau_c]
                + [self.mpa, self.mca, self.ds, self.qds, self.wqds, self.selected_variant, self.num_variants])


def csv_header(thresholds: MetricThresholds = MetricThresholds()) -> list[str]:
    return (["shape_id", "scd"] + [f"pa@{t:g}" for t in thresholds.tau_p] + [f"ca@{t:g}" for t in thresholds.tau_c]
            + ["mpa", "mca", "ds", "qds", "wqds", "selected_variant", "num_variants"])


def evaluate_variants(points, gt_t, gt_q, contacts, variants: Sequence[tuple[np.ndarray, np.ndarray]],
                      shape_id: str = "", thresholds: MetricThresholds = MetricThresholds(),
                      ca_weight_tau: float | None = None) -> MetricReport:
    """Quality metrics on the MMD-selected variant, diversity over all variants.

    ``variants`` is a list of ``(translations, quaternions)``. The CA used to
    gate/weight diversity is taken at ``ca_weight_tau`` (default: smallest tau_c).
    """
    points = np.asarray(points, dtype=np.float64)
    gt = place_parts(points, gt_t, gt_q)
    assembled = [place_parts(points, t, q) for t, q in variants]
    best = select_closest_variant(assembled, gt)
    t_best, q_best = variants[best]
    pcd = part_chamfers(points, t_best, q_best, gt_t, gt_q)
    pa = {tau: float(100.0 * np.mean(pcd < tau)) for tau in thresholds.tau_p}
    ca = {tau: connectivity_accuracy(t_best, q_best, contacts, tau) for tau in thresholds.tau_c}
    tau_w = ca_weight_tau if ca_weight_tau is not None else min(thresholds.tau_c)
    ca_frac = [connectivity_accuracy(t, q, contacts, tau_w) / 100.0 for t, q in variants]
    ds, qds, wqds = diversity_scores(assembled, ca_frac, thresholds.tau_q)
    return MetricReport(shape_id, shape_chamfer(assembled[best], gt), pa, ca,
                        mean_accuracy(pa, thresholds.tau_p), mean_accuracy(ca, thresholds.tau_c),
                        ds, qds, wqds, best, len(variants), thresholds)


def aggregate_row(reports: Sequence[MetricReport]) -> list:
    rows = np.array([r.row()[1:-2] for r in reports], dtype=np.float64)
    return ["ALL"] + rows.mean(axis=0).tolist() + ["", sum(r.num_variants for r in reports)]


def write_report_csv(path, reports: Sequence[MetricReport]) -> None:
    thresholds = reports[0].thresholds if reports else MetricThresholds()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(thresholds))
        for r in reports:
            writer.writerow(r.row())
        if reports:
            writer.writerow(aggregate_row(reports))
