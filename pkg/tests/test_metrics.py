import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partwhole.geometry import chamfer_distance, quaternion_matrix, random_quaternion
from partwhole.metrics import (
    THRESHOLDS,
    ContactPair,
    connectivity_accuracy,
    csv_header,
    diversity_scores,
    evaluate_variants,
    mean_accuracy,
    part_accuracy,
    part_chamfers,
    place_parts,
    select_closest_variant,
    shape_chamfer,
    write_report_csv,
)


def perturbed(rng, t, q, scale):
    t2 = t + scale * rng.standard_normal(t.shape)
    q2 = q + scale * rng.standard_normal(q.shape)
    return t2, q2 / np.linalg.norm(q2, axis=1, keepdims=True)


def test_perfect_prediction(table_shapes):
    s = table_shapes[0]
    t, q = s.gt_translations, s.gt_quaternions
    rep = evaluate_variants(s.points, t, q, s.contacts, [(t, q)])
    assert rep.scd == 0.0
    assert all(rep.pa[tau] == 100.0 for tau in THRESHOLDS)
    assert all(rep.ca[tau] == 100.0 for tau in THRESHOLDS)
    assert rep.mpa == rep.mca == 100.0


def test_double_cover_counts_as_perfect(table_shapes):
    s = table_shapes[1]
    t, q = s.gt_translations, s.gt_quaternions
    assert part_accuracy(s.points, t, -q, t, q, 0.01) == 100.0
    assert connectivity_accuracy(t, -q, s.contacts, 0.01) == 100.0


def test_part_chamfers_match_direct(table_shapes, rng):
    s = table_shapes[2]
    t, q = perturbed(rng, s.gt_translations, s.gt_quaternions, 0.05)
    got = part_chamfers(s.points, t, q, s.gt_translations, s.gt_quaternions)
    for i, p in enumerate(s.points):
        a = p @ quaternion_matrix(q[i]).T + t[i]
        b = p @ quaternion_matrix(s.gt_quaternions[i]).T + s.gt_translations[i]
        assert got[i] == pytest.approx(chamfer_distance(a, b))


def test_part_accuracy_fraction():
    pts = np.zeros((4, 2, 3))
    pts[:, 1, 0] = 1.0
    gt_t, gt_q = np.zeros((4, 3)), np.tile([1.0, 0, 0, 0], (4, 1))
    pred_t = gt_t.copy()
    pred_t[0, 0] = 0.5        # chamfer 2 * 0.25 / 2 ... shifted by 0.5: 0.25 + 0.25 = 0.5
    assert part_accuracy(pts, pred_t, gt_q, gt_t, gt_q, 0.01) == 75.0
    with pytest.raises(ValueError):
        part_accuracy(pts, pred_t, gt_q, gt_t, gt_q, 0.0)


def test_connectivity_accuracy_hand_case():
    ident = np.tile([1.0, 0, 0, 0], (3, 1))
    contacts = [ContactPair(0, 1, np.array([0.1, 0, 0]), np.array([-0.1, 0, 0])),
                ContactPair(1, 2, np.array([0.1, 0, 0]), np.array([-0.1, 0, 0]))]
    t = np.array([[0.0, 0, 0], [0.2, 0, 0], [0.6, 0, 0]])
    # pair 0 touches exactly; pair 1 is 0.2 apart, squared 0.04
    assert connectivity_accuracy(t, ident, contacts, 0.01) == 50.0
    assert connectivity_accuracy(t, ident, contacts, 0.05) == 100.0
    assert connectivity_accuracy(t, ident, [], 0.01) == 100.0


def test_mean_accuracy_exact():
    curve = {tau: v for tau, v in zip(THRESHOLDS, [10.0, 20.0, 40.0, 80.0, 100.0])}
    assert mean_accuracy(curve) == 50.0
    with pytest.raises(KeyError):
        mean_accuracy({0.01: 1.0})


def test_shape_chamfer_pools_parts(rng):
    a, b = rng.standard_normal((3, 5, 3)), rng.standard_normal((2, 7, 3))
    assert shape_chamfer(a, b) == pytest.approx(chamfer_distance(a.reshape(-1, 3), b.reshape(-1, 3)))


def test_select_closest_variant(rng):
    gt = rng.standard_normal((2, 10, 3))
    variants = [gt + 0.3, gt + 0.01, gt + 0.01, gt - 0.5]
    assert select_closest_variant(variants, gt) == 1
    with pytest.raises(ValueError):
        select_closest_variant([], gt)


def test_diversity_hand_case():
    a, b = np.zeros((1, 1, 3)), np.ones((1, 1, 3))
    ds, qds, wqds = diversity_scores([a, b], [1.0, 1.0])
    assert ds == pytest.approx(2 * 3.0 * 2 / 4)       # two ordered pairs of chamfer 6
    assert qds == ds and wqds == ds
    ds, qds, wqds = diversity_scores([a, b], [1.0, 0.2])
    assert qds == 0.0 and wqds == 0.0 and ds > 0
    _, qds, wqds = diversity_scores([a, b], [0.8, 0.6])
    assert wqds == pytest.approx(0.48 * qds)
    with pytest.raises(ValueError):
        diversity_scores([a], [1.0, 1.0])


@settings(max_examples=20)
@given(st.integers(0, 100_000))
def test_diversity_ordering(seed):
    rng = np.random.default_rng(seed)
    sets = [rng.standard_normal((3, 6, 3)) for _ in range(10)]
    ca = rng.uniform(0, 1, 10)
    ds, qds, wqds = diversity_scores(sets, ca)
    assert 0 <= wqds <= qds <= ds


@settings(max_examples=15)
@given(st.integers(0, 100_000), st.floats(0.001, 0.3))
def test_accuracy_monotone_in_threshold(seed, scale):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.3, 0.3, (4, 20, 3))
    gt_t, gt_q = rng.uniform(-0.5, 0.5, (4, 3)), random_quaternion(rng, 4)
    t, q = perturbed(rng, gt_t, gt_q, scale)
    contacts = [ContactPair(i, i + 1, pts[i, 0], pts[i + 1, 0]) for i in range(3)]
    taus = sorted(rng.uniform(0.001, 0.2, 6))
    pa = [part_accuracy(pts, t, q, gt_t, gt_q, tau) for tau in taus]
    ca = [connectivity_accuracy(t, q, contacts, tau) for tau in taus]
    assert pa == sorted(pa) and ca == sorted(ca)


def test_report_csv(table_shapes, tmp_path, rng):
    reports = []
    for s in table_shapes[:2]:
        variants = [perturbed(rng, s.gt_translations, s.gt_quaternions, 0.05) for _ in range(3)]
        reports.append(evaluate_variants(s.points, s.gt_translations, s.gt_quaternions, s.contacts, variants,
                                         shape_id=s.shape_id))
    path = tmp_path / "m.csv"
    write_report_csv(path, reports)
    rows = list(csv.reader(path.open()))
    assert rows[0] == csv_header()
    assert [r[0] for r in rows[1:]] == [s.shape_id for s in table_shapes[:2]] + ["ALL"]
    assert float(rows[-1][1]) == pytest.approx(np.mean([r.scd for r in reports]))


def test_evaluate_variants_uses_mmd_choice(table_shapes, rng):
    s = table_shapes[0]
    gt = (s.gt_translations, s.gt_quaternions)
    far = perturbed(rng, *gt, 0.2)
    rep = evaluate_variants(s.points, *gt, s.contacts, [far, gt, far])
    assert rep.selected_variant == 1 and rep.scd == 0.0 and rep.num_variants == 3
    placed = place_parts(s.points, *gt)
    np.testing.assert_allclose(placed, s.assembled())
