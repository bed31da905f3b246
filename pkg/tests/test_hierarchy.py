import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import clustering_oracle, equivalence_oracle
from partwhole.geometry import aabb_of, chamfer_distance, farthest_point_sample
from partwhole.hierarchy import SuperPartAssignment, build_super_parts, geometric_equivalence, pairwise_chamfer
from partwhole.synth import sample_cuboid


def box(size, n=200, seed=0):
    return sample_cuboid(size, n, np.random.default_rng(seed))


def test_identical_clouds_equivalent():
    p = box((0.3, 0.2, 0.1))
    assert geometric_equivalence(p, p.copy())


def test_scaled_cube_not_equivalent():
    assert not geometric_equivalence(box((1, 1, 1)), box((2, 2, 2)))


def test_constructed_pair_within_both_thresholds():
    a = box((0.6, 0.3, 0.2), seed=1)
    b = box((0.65, 0.3, 0.2), seed=2)
    ext = np.abs(aabb_of(a).extents - aabb_of(b).extents).max()
    cd = chamfer_distance(farthest_point_sample(a, 100), farthest_point_sample(b, 100))
    assert ext <= 0.1 and cd < 0.2
    assert geometric_equivalence(a, b)


def test_chamfer_threshold_alone_can_reject():
    # same extents, very different shapes: a box shell vs points bunched at two corners
    a = box((0.5, 0.5, 0.5))
    b = np.array([[-0.25, -0.25, -0.25], [0.25, 0.25, 0.25]] * 50)
    assert np.abs(aabb_of(a).extents - aabb_of(b).extents).max() == pytest.approx(0.0)
    assert not geometric_equivalence(a, b, chamfer_tol=0.05)


def test_chair_like_grouping():
    legs = [box((0.4, 0.05, 0.05), seed=s) for s in range(4)]
    seat = box((0.5, 0.5, 0.06), seed=10)
    back = box((0.5, 0.3, 0.04), seed=11)
    parts = [seat, legs[0], back, legs[1], legs[2], legs[3]]
    a = build_super_parts(parts)
    assert a.members == ((0,), (1, 3, 4, 5), (2,))


def test_single_part():
    a = build_super_parts([box((0.1, 0.1, 0.1))])
    assert a.num_supers == 1 and a.members == ((0,),)


def test_empty_raises():
    with pytest.raises(ValueError):
        build_super_parts([])


def test_assignment_partition_checks():
    with pytest.raises(ValueError):
        SuperPartAssignment.from_members([[0, 1], [1]])
    a = SuperPartAssignment.from_members([[0, 2], [1]])
    assert a.part_to_super == (0, 1, 0)
    assert a.ranks() == [0, 0, 1]
    np.testing.assert_array_equal(a.membership_matrix(), [[1, 0, 1], [0, 1, 0]])


def test_matches_oracle_on_generated_shapes(table_shapes):
    for s in table_shapes:
        parts = list(s.points)
        assert build_super_parts(parts).members == tuple(clustering_oracle(equivalence_oracle(parts)))


def test_pairwise_chamfer_symmetric(table_shapes):
    cd = pairwise_chamfer(list(table_shapes[0].points))
    np.testing.assert_allclose(cd, cd.T)
    assert np.all(np.diag(cd) == 0)


# -- properties --------------------------------------------------------------------------------
SIZES = [(0.4, 0.05, 0.05), (0.6, 0.4, 0.05), (0.3, 0.3, 0.3), (0.9, 0.2, 0.1)]


@st.composite
def part_sets(draw):
    """Parts drawn from a few well separated templates, so equivalence is transitive."""
    kinds = draw(st.lists(st.integers(0, len(SIZES) - 1), min_size=1, max_size=7))
    seeds = draw(st.lists(st.integers(0, 10_000), min_size=len(kinds), max_size=len(kinds)))
    return [box(SIZES[k], 120, s) for k, s in zip(kinds, seeds)], kinds


@settings(max_examples=25)
@given(part_sets(), st.randoms())
def test_partition_and_permutation_invariance(sample, random):
    parts, kinds = sample
    a = build_super_parts(parts)
    flat = sorted(i for m in a.members for i in m)
    assert flat == list(range(len(parts)))
    assert [min(m) for m in a.members] == sorted(min(m) for m in a.members)
    for m in a.members:
        assert len({kinds[i] for i in m}) == 1
    perm = list(range(len(parts)))
    random.shuffle(perm)
    b = build_super_parts([parts[i] for i in perm])
    relabelled = {frozenset(perm[i] for i in m) for m in b.members}
    assert relabelled == {frozenset(m) for m in a.members}


@settings(max_examples=25)
@given(st.lists(st.tuples(st.floats(0.05, 0.8), st.floats(0.05, 0.8), st.floats(0.05, 0.8)),
                min_size=1, max_size=6), st.integers(0, 1000))
def test_clusters_pairwise_equivalent(sizes, seed):
    parts = [box(s, 80, seed + i) for i, s in enumerate(sizes)]
    eq = equivalence_oracle(parts, k=100)
    for m in build_super_parts(parts).members:
        for i, j in itertools.combinations(m, 2):
            assert eq[i, j]
