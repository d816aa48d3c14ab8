import numpy as np
import pytest

from gale.errors import InvalidArgumentError
from gale.neighbors import (
    MultiScaleSchedule,
    Scale,
    ball_query,
    build_index,
    query_all_scales,
)


def uniform_points(n, seed):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 3))


class TestBuildIndex:
    def test_empty_point_set(self):
        index = build_index(np.zeros((0, 3)), cell_size=1.0)
        nl = ball_query(index, [[0.0, 0.0, 0.0]], radius=1.0, cap=4)
        assert nl.n_queries == 1
        assert len(nl.indices[0]) == 0

    def test_single_point_single_cell(self):
        index = build_index([[0.0, 0.0, 0.0]], cell_size=1.0)
        assert len(index._cells) == 1
        nl = ball_query(index, [[0.1, 0.0, 0.0]], radius=0.5, cap=1)
        assert nl.indices[0].tolist() == [0]

    def test_non_positive_cell_size_rejected(self):
        with pytest.raises(InvalidArgumentError):
            build_index(uniform_points(4, 0), cell_size=0.0)

    def test_index_matches_brute_force(self):
        targets = uniform_points(1000, 1)
        queries = uniform_points(100, 2)
        for radius in (0.05, 0.2):
            index = build_index(targets, radius)
            fast = ball_query(index, queries, radius, cap=16, mode="indexed")
            slow = ball_query(index, queries, radius, cap=16, mode="brute")
            assert fast.equals(slow)


class TestBallQuery:
    def test_coincident_target_included(self):
        index = build_index([[1.0, 2.0, 3.0]], cell_size=0.1)
        nl = ball_query(index, [[1.0, 2.0, 3.0]], radius=0.1, cap=4)
        assert nl.indices[0].tolist() == [0]
        assert nl.distances[0][0] == 0.0

    def test_line_targets_capped_to_nearest(self):
        targets = [[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]
        index = build_index(targets, cell_size=1.0)
        nl = ball_query(index, [[0.0, 0.0, 0.0]], radius=2.5, cap=2)
        assert nl.indices[0].tolist() == [0, 1]
        assert np.allclose(nl.distances[0], [1.0, 2.0])

    def test_empty_result_is_valid(self):
        index = build_index([[10.0, 10.0, 10.0]], cell_size=1.0)
        nl = ball_query(index, [[0.0, 0.0, 0.0]], radius=1.0, cap=4)
        assert len(nl.indices[0]) == 0

    def test_boundary_is_inclusive(self):
        index = build_index([[1.0, 0.0, 0.0]], cell_size=1.0)
        nl = ball_query(index, [[0.0, 0.0, 0.0]], radius=1.0, cap=1)
        assert nl.indices[0].tolist() == [0]

    def test_offsets_point_from_query_to_target(self):
        index = build_index([[2.0, 0.0, 0.0]], cell_size=1.0)
        nl = ball_query(index, [[1.0, 0.0, 0.0]], radius=2.0, cap=1)
        assert np.allclose(nl.offsets[0][0], [1.0, 0.0, 0.0])

    def test_tie_broken_by_smaller_index(self):
        targets = [[1.0, 0, 0], [-1.0, 0, 0]]
        index = build_index(targets, cell_size=1.0)
        nl = ball_query(index, [[0.0, 0.0, 0.0]], radius=1.5, cap=1)
        assert nl.indices[0].tolist() == [0]

    def test_invalid_arguments(self):
        index = build_index(uniform_points(4, 3), cell_size=0.5)
        q = [[0.0, 0.0, 0.0]]
        with pytest.raises(InvalidArgumentError):
            ball_query(index, q, radius=0.0, cap=1)
        with pytest.raises(InvalidArgumentError):
            ball_query(index, q, radius=0.5, cap=0)
        with pytest.raises(InvalidArgumentError):
            ball_query(index, q, radius=0.5, cap=1, mode="fuzzy")


class TestInvariants:
    def test_radius_containment(self):
        targets = uniform_points(300, 5)
        queries = uniform_points(20, 6)
        small = ball_query(build_index(targets, 0.1), queries, 0.1, cap=300)
        large = ball_query(build_index(targets, 0.3), queries, 0.3, cap=300)
        for s, l in zip(small.indices, large.indices):
            assert set(s.tolist()) <= set(l.tolist())

    def test_target_permutation_preserves_physical_results(self):
        rng = np.random.default_rng(7)
        targets = uniform_points(200, 8)
        queries = uniform_points(10, 9)
        perm = rng.permutation(len(targets))
        a = ball_query(build_index(targets, 0.2), queries, 0.2, cap=8)
        b = ball_query(build_index(targets[perm], 0.2), queries, 0.2, cap=8)
        for ia, ib, da, db in zip(a.indices, b.indices, a.distances, b.distances):
            assert np.array_equal(targets[ia], targets[perm][ib])
            assert np.array_equal(da, db)

    def test_monotone_cap(self):
        targets = uniform_points(400, 10)
        queries = uniform_points(15, 11)
        index = build_index(targets, 0.25)
        small = ball_query(index, queries, 0.25, cap=3)
        large = ball_query(index, queries, 0.25, cap=9)
        for s, l in zip(small.indices, large.indices):
            assert np.array_equal(s, l[: len(s)])


class TestQueryAllScales:
    def test_one_list_per_scale(self):
        schedule = MultiScaleSchedule.of([(0.1, 4), (0.4, 8)])
        targets = uniform_points(100, 12)
        index = build_index(targets, 0.4)
        lists = query_all_scales(index, uniform_points(5, 13), schedule)
        assert len(lists) == 2
        assert lists[0].radius == 0.1 and lists[0].cap == 4
        assert lists[1].radius == 0.4 and lists[1].cap == 8

    def test_small_radius_subset_of_large_candidates(self):
        schedule = MultiScaleSchedule.of([(0.05, 8), (2.5, 8)])
        targets = uniform_points(200, 14)
        index = build_index(targets, 0.5)
        queries = uniform_points(10, 15)
        small, large = query_all_scales(index, queries, schedule)
        uncapped = ball_query(index, queries, 2.5, cap=200)
        for s, l in zip(small.indices, uncapped.indices):
            assert set(s.tolist()) <= set(l.tolist())

    def test_repeated_scales_identical(self):
        schedule = MultiScaleSchedule.of([(0.2, 6), (0.2, 6)])
        targets = uniform_points(150, 16)
        index = build_index(targets, 0.2)
        a, b = query_all_scales(index, uniform_points(8, 17), schedule)
        assert a.equals(b)

    def test_schedule_validation(self):
        with pytest.raises(InvalidArgumentError):
            MultiScaleSchedule.of([])
        with pytest.raises(InvalidArgumentError):
            Scale(radius=-1.0, cap=3)
        with pytest.raises(InvalidArgumentError):
            Scale(radius=0.5, cap=0)
        schedule = MultiScaleSchedule.of([(0.1, 2), (0.2, 3)])
        assert len(schedule.truncated(1)) == 1
