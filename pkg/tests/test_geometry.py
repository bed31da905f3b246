import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import chamfer_oracle, expanded_rotation_matrix, fps_oracle
from partwhole.geometry import (
    Pose6DoF,
    aabb_of,
    apply_pose,
    chamfer_distance,
    chamfer_distance_sum,
    farthest_point_indices,
    farthest_point_sample,
    pca_canonicalize,
    quaternion_from_matrix,
    random_quaternion,
    rodrigues,
)

coords = st.floats(-1.0, 1.0, allow_nan=False, width=64)


def clouds(min_size=1, max_size=12):
    return st.integers(min_size, max_size).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def unit_quaternions():
    return arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1).map(
        lambda q: q / np.linalg.norm(q))


# -- chamfer -----------------------------------------------------------------------------
def test_chamfer_identical_is_zero(rng):
    x = rng.standard_normal((20, 3))
    assert chamfer_distance(x, x) == 0.0


def test_chamfer_two_points():
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)


def test_chamfer_matches_brute_force(rng):
    for _ in range(20):
        x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        assert chamfer_distance(x, y) == pytest.approx(chamfer_oracle(x, y), rel=1e-12)


def test_chamfer_large_sets_use_tree_and_agree(rng):
    x, y = rng.standard_normal((400, 3)), rng.standard_normal((300, 3))
    d = np.sum((x[:, None] - y[None]) ** 2, axis=2)
    assert chamfer_distance(x, y) == pytest.approx(d.min(1).mean() + d.min(0).mean(), rel=1e-10)


def test_chamfer_sum_variant(rng):
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
    d = np.sum((x[:, None] - y[None]) ** 2, axis=2)
    assert chamfer_distance_sum(x, y) == pytest.approx(d.min(1).sum() + d.min(0).sum())


@pytest.mark.parametrize("x, y", [(np.zeros((0, 3)), np.zeros((2, 3))), (np.zeros((2, 3)), np.zeros((0, 3)))])
def test_chamfer_empty_raises(x, y):
    with pytest.raises(ValueError):
        chamfer_distance(x, y)


@given(clouds(), clouds())
def test_chamfer_symmetric_and_nonnegative(x, y):
    a, b = chamfer_distance(x, y), chamfer_distance(y, x)
    assert a == pytest.approx(b, abs=1e-12)
    assert a >= 0


@given(clouds())
def test_chamfer_self_zero(x):
    assert chamfer_distance(x, x) == 0.0


# -- rodrigues ---------------------------------------------------------------------------------
def test_rodrigues_identity():
    np.testing.assert_array_equal(rodrigues([1, 0, 0, 0]), np.eye(3))


def test_rodrigues_x_flip():
    np.testing.assert_allclose(rodrigues([0, 1, 0, 0]), np.diag([1.0, -1.0, -1.0]))


def test_rodrigues_matches_expanded_matrix(rng):
    for q in random_quaternion(rng, 50):
        np.testing.assert_allclose(rodrigues(q), expanded_rotation_matrix(q), atol=1e-15)


def test_rodrigues_rejects_non_unit():
    with pytest.raises(ValueError):
        rodrigues([1.0, 0.1, 0, 0])


@given(unit_quaternions())
def test_rodrigues_orthonormal_and_double_cover(q):
    m = rodrigues(q)
    assert np.max(np.abs(m.T @ m - np.eye(3))) < 1e-6
    assert abs(np.linalg.det(m) - 1) < 1e-6
    np.testing.assert_allclose(rodrigues(-q), m, atol=1e-15)


def test_quaternion_from_matrix_round_trip(rng):
    for q in random_quaternion(rng, 50):
        back = quaternion_from_matrix(rodrigues(q))
        assert back[0] >= 0
        np.testing.assert_allclose(rodrigues(back), rodrigues(q), atol=1e-12)


# -- poses ----------------------------------------------------------------------------------------
def test_apply_identity_pose(rng):
    x = rng.standard_normal((10, 3))
    np.testing.assert_array_equal(apply_pose(x, Pose6DoF()), x)


def test_apply_pure_translation():
    out = apply_pose([[0, 0, 0]], Pose6DoF([0.5, 0, 0], [1, 0, 0, 0]))
    np.testing.assert_allclose(out, [[0.5, 0, 0]])


def test_pose_inverse_round_trip(rng):
    for _ in range(50):
        pose = Pose6DoF(rng.uniform(-1, 1, 3), random_quaternion(rng))
        x = rng.standard_normal((12, 3))
        np.testing.assert_allclose(apply_pose(apply_pose(x, pose), pose.inverse()), x, atol=1e-6)


def test_pose_compose_matches_sequential(rng):
    a = Pose6DoF(rng.uniform(-0.5, 0.5, 3), random_quaternion(rng))
    b = Pose6DoF(rng.uniform(-0.5, 0.5, 3), random_quaternion(rng))
    x = rng.standard_normal((6, 3))
    np.testing.assert_allclose(apply_pose(x, a.compose(b)), apply_pose(apply_pose(x, b), a), atol=1e-12)


def test_pose_check_bounds():
    Pose6DoF([0.99, -0.99, 0], [1, 0, 0, 0]).check()
    with pytest.raises(ValueError):
        Pose6DoF([1.0, 0, 0], [1, 0, 0, 0]).check()
    with pytest.raises(ValueError):
        Pose6DoF([0, 0, 0], [1, 1, 0, 0]).check()


@given(clouds(2, 10), unit_quaternions(), arrays(np.float64, 3, elements=coords))
def test_apply_pose_is_rigid(x, q, t):
    y = apply_pose(x, Pose6DoF(t, q))
    dx = np.linalg.norm(x[:, None] - x[None], axis=2)
    dy = np.linalg.norm(y[:, None] - y[None], axis=2)
    assert np.max(np.abs(dx - dy)) < 1e-6
    assert y.shape == x.shape


# -- FPS ---------------------------------------------------------------------------------------
def test_fps_collinear():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    np.testing.assert_array_equal(farthest_point_sample(pts, 2, 0), pts[[0, 3]])


def test_fps_full_returns_all(rng):
    pts = rng.standard_normal((15, 3))
    idx = farthest_point_indices(pts, 15, 4)
    assert idx[0] == 4 and sorted(idx) == list(range(15))


def test_fps_matches_oracle(rng):
    for _ in range(10):
        pts = rng.standard_normal((64, 3))
        assert list(farthest_point_indices(pts, 8, 0)) == fps_oracle(pts, 8, 0)


def test_fps_ties_pick_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]], float)
    assert farthest_point_indices(pts, 2, 0)[1] == 1


def test_fps_k_too_large():
    with pytest.raises(ValueError):
        farthest_point_indices(np.zeros((3, 3)), 4)


@given(clouds(3, 20), st.data())
def test_fps_deterministic(x, data):
    k = data.draw(st.integers(1, len(x)))
    seed = data.draw(st.integers(0, len(x) - 1))
    a = farthest_point_indices(x, k, seed)
    np.testing.assert_array_equal(a, farthest_point_indices(x, k, seed))
    assert a[0] == seed and len(a) == k


# -- AABB ----------------------------------------------------------------------------------------
def test_aabb_single_point():
    box = aabb_of([[0.1, 0.2, 0.3]])
    np.testing.assert_array_equal(box.min, box.max)


def test_aabb_unit_cube():
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    box = aabb_of(corners)
    np.testing.assert_array_equal(box.min, [0, 0, 0])
    np.testing.assert_array_equal(box.max, [1, 1, 1])


def test_aabb_linear_scan(rng):
    pts = rng.standard_normal((50, 3))
    lo = [min(p[k] for p in pts) for k in range(3)]
    hi = [max(p[k] for p in pts) for k in range(3)]
    box = aabb_of(pts)
    np.testing.assert_array_equal(box.min, lo)
    np.testing.assert_array_equal(box.max, hi)


def test_aabb_empty():
    with pytest.raises(ValueError):
        aabb_of(np.zeros((0, 3)))


# -- PCA --------------------------------------------------------------------------------------------
def _skewed_cloud(rng, n=300):
    pts = rng.standard_normal((n, 3)) * [1.0, 0.5, 0.2]
    return pts + 0.3 * np.abs(pts) ** 1.5    # break reflection symmetry along every axis


def test_pca_reconstructs_input(rng):
    pts = _skewed_cloud(rng) + [0.3, -0.2, 0.1]
    canon, frame = pca_canonicalize(pts)
    np.testing.assert_allclose(apply_pose(canon, frame), pts, atol=1e-10)
    np.testing.assert_allclose(canon.mean(axis=0), 0, atol=1e-12)
    cov = canon.T @ canon / len(canon)
    assert np.allclose(cov - np.diag(np.diag(cov)), 0, atol=1e-10)
    assert cov[0, 0] >= cov[1, 1] >= cov[2, 2]


def test_pca_translation_invariant(rng):
    pts = _skewed_cloud(rng)
    a, _ = pca_canonicalize(pts)
    b, _ = pca_canonicalize(pts + [5.0, -2.0, 1.0])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_pca_rotation_invariant(rng):
    pts = _skewed_cloud(rng)
    base, _ = pca_canonicalize(pts)
    for _ in range(10):
        moved = apply_pose(pts, Pose6DoF(rng.uniform(-1, 1, 3), random_quaternion(rng)))
        canon, _ = pca_canonicalize(moved)
        np.testing.assert_allclose(canon, base, atol=1e-5)


def test_pca_canonical_box_unchanged_up_to_sign(rng):
    box = rng.uniform(-1, 1, (200, 3)) * [0.8, 0.4, 0.1]
    box -= box.mean(axis=0)
    canon, _ = pca_canonicalize(box)
    np.testing.assert_allclose(np.abs(canon), np.abs(box), atol=0.05)


def test_pca_frame_is_rotation(rng):
    _, frame = pca_canonicalize(rng.standard_normal((40, 3)))
    frame.check(bounded=False)
    assert np.linalg.det(frame.rotation()) == pytest.approx(1.0)
