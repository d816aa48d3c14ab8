import numpy as np
import pytest

import gale.context as ctx_mod
from gale.context import (
    GeometrySample,
    LocalStream,
    build_context,
    build_neighbor_cache,
    geom_to_input_features,
    input_to_geom_features,
    pool_reduce,
)
from gale.errors import EmptyInputError, InvalidSampleError, ShapeError
from gale.neighbors import MultiScaleSchedule
from gale.tensor import Mlp, Tensor


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def linear_mlp(rng, d_in, d_out, zero_bias=False, gelu=True):
    w = rng.standard_normal((d_in, d_out))
    b = np.zeros((1, d_out)) if zero_bias else rng.standard_normal((1, d_out))
    return Mlp([(f64(w), f64(b), "gelu" if gelu else "identity")])


def toy_setup(seed=0, n_tokens=6, n_geom=5, d_g=3, d_x=2):
    rng = np.random.default_rng(seed)
    stream = LocalStream("surface", rng.uniform(-1, 1, (n_tokens, 3)), rng.standard_normal((n_tokens, d_x)))
    geom = GeometrySample(
        points=rng.uniform(-1, 1, (n_geom, 3)),
        features=rng.standard_normal((n_geom, d_g)),
        params=rng.standard_normal(4),
    )
    return rng, stream, geom


class TestGeomToInputFeatures:
    def test_no_neighbors_gives_zeros(self):
        rng, stream, geom = toy_setup()
        geom.points = geom.points + 100.0  # move geometry out of reach
        schedule = MultiScaleSchedule.of([(0.5, 4), (1.0, 4)])
        psi = [linear_mlp(rng, 6, 8) for _ in schedule]
        out = geom_to_input_features(stream, geom, schedule, psi)
        assert out.shape == (6, 16)
        assert np.abs(out.data).max() == 0.0

    def test_single_coincident_neighbor_is_direct_mlp(self):
        rng = np.random.default_rng(1)
        stream = LocalStream("s", [[0.0, 0.0, 0.0]], [[1.0, 2.0]])
        geom = GeometrySample([[0.0, 0.0, 0.0]], [[0.5, -0.5, 1.5]], np.zeros(2))
        schedule = MultiScaleSchedule.of([(0.1, 4)])
        psi = [linear_mlp(rng, 6, 5)]
        out = geom_to_input_features(stream, geom, schedule, psi)
        direct = psi[0](f64([[0.5, -0.5, 1.5, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, direct.data, atol=1e-15)

    def test_width_is_scales_times_dbq(self):
        rng, stream, geom = toy_setup()
        schedule = MultiScaleSchedule.of([(0.5, 4), (1.0, 4), (2.0, 4)])
        psi = [linear_mlp(rng, 6, 16) for _ in schedule]
        out = geom_to_input_features(stream, geom, schedule, psi)
        assert out.shape == (stream.n_tokens, 48)

    def test_mlp_width_mismatch_raises(self):
        rng, stream, geom = toy_setup()
        schedule = MultiScaleSchedule.of([(0.5, 4)])
        with pytest.raises(ShapeError):
            geom_to_input_features(stream, geom, schedule, [linear_mlp(rng, 5, 8)])

    def test_mean_over_neighbors(self):
        rng = np.random.default_rng(2)
        stream = LocalStream("s", [[0.0, 0.0, 0.0]], [[0.0]])
        geom = GeometrySample(
            [[0.1, 0, 0], [0.0, 0.1, 0]], [[1.0], [3.0]], np.zeros(1)
        )
        schedule = MultiScaleSchedule.of([(1.0, 8)])
        psi = [linear_mlp(rng, 4, 3)]
        out = geom_to_input_features(stream, geom, schedule, psi)
        r0 = psi[0](f64([[1.0, 0.1, 0.0, 0.0]])).data
        r1 = psi[0](f64([[3.0, 0.0, 0.1, 0.0]])).data
        assert np.allclose(out.data, (r0 + r1) / 2, atol=1e-14)


class TestInputToGeomFeatures:
    def test_far_geometry_gets_zeros(self):
        rng, stream, geom = toy_setup()
        geom.points = geom.points + 50.0
        schedule = MultiScaleSchedule.of([(0.5, 4), (1.0, 4)])
        phi = [linear_mlp(rng, 5, 7) for _ in schedule]
        outs = input_to_geom_features([stream], geom, schedule, phi)
        assert len(outs) == 2
        for h in outs:
            assert h.shape == (geom.n_points, 7)
            assert np.abs(h.data).max() == 0.0

    def test_single_token_inside_ball(self):
        rng = np.random.default_rng(3)
        stream = LocalStream("s", [[0.2, 0.0, 0.0]], [[1.5, -2.0]])
        geom = GeometrySample([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], np.zeros(1))
        schedule = MultiScaleSchedule.of([(1.0, 4)])
        phi = [linear_mlp(rng, 5, 6)]
        out = input_to_geom_features([stream], geom, schedule, phi)[0]
        direct = phi[0](f64([[1.5, -2.0, 0.2, 0.0, 0.0]]))
        assert np.allclose(out.data, direct.data, atol=1e-15)

    def test_two_streams_equal_concatenated_stream(self):
        rng, s1, geom = toy_setup(seed=4)
        s2 = LocalStream("volume", rng.uniform(-1, 1, (4, 3)), rng.standard_normal((4, 2)))
        merged = LocalStream(
            "merged",
            np.concatenate([s1.positions, s2.positions]),
            np.concatenate([s1.features, s2.features]),
        )
        schedule = MultiScaleSchedule.of([(1.5, 10)])
        phi = [linear_mlp(rng, 5, 6)]
        two = input_to_geom_features([s1, s2], geom, schedule, phi)[0]
        one = input_to_geom_features([merged], geom, schedule, phi)[0]
        assert np.array_equal(two.data, one.data)


class TestPoolReduce:
    def test_identical_rows_either_mode(self):
        rows = f64(np.tile([1.0, -2.0, 3.0], (5, 1)))
        assert np.allclose(pool_reduce(rows, "mean").data, [[1.0, -2.0, 3.0]], atol=1e-15)
        assert np.allclose(pool_reduce(rows, "max").data, [[1.0, -2.0, 3.0]], atol=0)

    def test_mean_example(self):
        out = pool_reduce(f64([[1.0, 3.0], [3.0, 1.0]]), "mean")
        assert np.allclose(out.data, [[2.0, 2.0]], atol=0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((30, 4))
        perm = rng.permutation(30)
        for mode in ("mean", "max"):
            a = pool_reduce(f64(rows), mode).data
            b = pool_reduce(f64(rows[perm]), mode).data
            assert np.array_equal(a, b)

    def test_empty_rows_error(self):
        with pytest.raises(EmptyInputError):
            pool_reduce(f64(np.zeros((0, 3))), "mean")


class TestBuildContext:
    def context_parts(self, seed=6, n_scales=2, d_c=8):
        rng, stream, geom = toy_setup(seed=seed)
        schedule = MultiScaleSchedule.of([(0.8, 4), (2.0, 6)][:n_scales] or [(0.8, 4)])
        phi = [linear_mlp(rng, 5, d_c) for _ in range(len(schedule))]
        rho = linear_mlp(rng, 3, d_c)
        embed = linear_mlp(rng, 4, d_c, zero_bias=True, gelu=False)
        return rng, stream, geom, schedule, phi, rho, embed

    def test_row_count_is_scales_plus_two(self):
        rng, stream, geom = toy_setup(seed=7)
        schedule = MultiScaleSchedule.of([(0.5, 2), (0.8, 2), (1.2, 2), (2.0, 2)])
        phi = [linear_mlp(rng, 5, 6) for _ in schedule]
        rho = linear_mlp(rng, 3, 6)
        embed = linear_mlp(rng, 4, 6, gelu=False)
        ctx = build_context([stream], geom, schedule, phi, rho, embed)
        assert ctx.tokens.shape == (6, 6)
        assert ctx.n_scales == 4

    def test_geometry_permutation_bit_identical(self):
        rng, stream, geom, schedule, phi, rho, embed = self.context_parts()
        a = build_context([stream], geom, schedule, phi, rho, embed).tokens.data
        perm = rng.permutation(geom.n_points)
        geom2 = GeometrySample(geom.points[perm], geom.features[perm], geom.params)
        b = build_context([stream], geom2, schedule, phi, rho, embed).tokens.data
        assert np.array_equal(a, b)

    def test_zero_params_with_zero_bias_embed(self):
        rng, stream, geom, schedule, phi, rho, embed = self.context_parts(seed=8)
        geom.params = np.zeros(4)
        ctx = build_context([stream], geom, schedule, phi, rho, embed)
        assert np.abs(ctx.tokens.data[0]).max() == 0.0

    def test_empty_geometry_rejected(self):
        rng, stream, geom, schedule, phi, rho, embed = self.context_parts(seed=9)
        empty = GeometrySample(np.zeros((0, 3)), np.zeros((0, 3)), geom.params)
        with pytest.raises(InvalidSampleError):
            build_context([stream], empty, schedule, phi, rho, embed)

    def test_zero_geometry_features_zero_bias_rho(self):
        rng, stream, geom, schedule, phi, rho, embed = self.context_parts(seed=10)
        geom.features = np.zeros_like(geom.features)
        rho_zb = linear_mlp(rng, 3, 8, zero_bias=True)
        ctx = build_context([stream], geom, schedule, phi, rho_zb, embed)
        assert np.abs(ctx.tokens.data[1]).max() == 0.0

    def test_call_counter_increments(self):
        rng, stream, geom, schedule, phi, rho, embed = self.context_parts(seed=11)
        before = ctx_mod.BUILD_CONTEXT_CALLS
        build_context([stream], geom, schedule, phi, rho, embed)
        assert ctx_mod.BUILD_CONTEXT_CALLS == before + 1


class TestOffsetsAndCache:
    def test_offsets_scale_with_coordinates(self):
        _, stream, geom = toy_setup(seed=12)
        schedule = MultiScaleSchedule.of([(2.0, 6)])
        cache1 = build_neighbor_cache([stream], geom, schedule)
        stream2 = LocalStream(stream.name, 2.0 * stream.positions, stream.features)
        geom2 = GeometrySample(2.0 * geom.points, geom.features, geom.params)
        schedule2 = MultiScaleSchedule.of([(4.0, 6)])
        cache2 = build_neighbor_cache([stream2], geom2, schedule2)
        nl1 = cache1.geom_to_stream["surface"][0]
        nl2 = cache2.geom_to_stream["surface"][0]
        for o1, o2 in zip(nl1.offsets, nl2.offsets):
            assert np.allclose(2.0 * o1, o2, atol=1e-12)

    def test_token_permutation_leaves_context_bits(self):
        rng, stream, geom = toy_setup(seed=13, n_tokens=12)
        schedule = MultiScaleSchedule.of([(1.0, 5), (2.5, 8)])
        phi = [linear_mlp(rng, 5, 6) for _ in schedule]
        rho = linear_mlp(rng, 3, 6)
        embed = linear_mlp(rng, 4, 6, gelu=False)
        a = build_context([stream], geom, schedule, phi, rho, embed).tokens.data
        perm = rng.permutation(stream.n_tokens)
        stream2 = LocalStream(stream.name, stream.positions[perm], stream.features[perm])
        b = build_context([stream2], geom, schedule, phi, rho, embed).tokens.data
        assert np.array_equal(a, b)

    def test_width_mismatch_between_components(self):
        rng, stream, geom, schedule, phi, rho, embed = TestBuildContext().context_parts(seed=14)
        bad_rho = linear_mlp(rng, 3, 5)
        with pytest.raises(ShapeError):
            build_context([stream], geom, schedule, phi, bad_rho, embed)

    def test_widths_across_schedule_matrix(self):
        rng, stream, geom = toy_setup(seed=15)
        pairs = [(0.5, 2), (0.9, 3), (1.4, 4), (2.2, 5)]
        for n_scales in (1, 2, 3, 4):
            for d_bq, d_c in ((2, 4), (5, 7)):
                schedule = MultiScaleSchedule.of(pairs[:n_scales])
                psi = [linear_mlp(rng, 6, d_bq) for _ in range(n_scales)]
                aug = geom_to_input_features(stream, geom, schedule, psi)
                assert aug.shape == (stream.n_tokens, n_scales * d_bq)
                phi = [linear_mlp(rng, 5, d_c) for _ in range(n_scales)]
                rho = linear_mlp(rng, 3, d_c)
                embed = linear_mlp(rng, 4, d_c, gelu=False)
                ctx = build_context([stream], geom, schedule, phi, rho, embed)
                assert ctx.tokens.shape == (n_scales + 2, d_c)
