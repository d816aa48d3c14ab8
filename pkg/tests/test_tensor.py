import math

import numpy as np
import pytest

import gale.tensor as T
from gale.errors import (
    EmptyInputError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
)
from gale.tensor import (
    Mlp,
    ParamStore,
    Segments,
    Tensor,
    gradcheck,
    layer_norm,
    mlp_forward,
    scaled_dot_attention,
)


def f64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def attention_oracle(q, k, v):
    """Per-row softmax and explicit summation, scalar loops only."""
    n, d_k = q.shape
    m, d_v = v.shape
    out = np.zeros((n, d_v))
    for i in range(n):
        logits = [sum(q[i, t] * k[j, t] for t in range(d_k)) / math.sqrt(d_k) for j in range(m)]
        mx = max(logits)
        w = [math.exp(l - mx) for l in logits]
        z = sum(w)
        for j in range(m):
            for c in range(d_v):
                out[i, c] += (w[j] / z) * v[j, c]
    return out


class TestScaledDotAttention:
    def test_single_key_gets_full_weight(self):
        out = scaled_dot_attention(f64([[0.3, -2.0]]), f64([[5.0, 1.0]]), f64([[7.0]]))
        assert out.data.tolist() == [[7.0]]

    def test_equal_logits_average_values(self):
        out = scaled_dot_attention(f64([[0.0]]), f64([[0.0], [0.0]]), f64([[1.0], [3.0]]))
        assert np.allclose(out.data, [[2.0]], atol=1e-15)

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(11)
        q, k, v = (rng.standard_normal((4, 8)) for _ in range(3))
        out = scaled_dot_attention(f64(q), f64(k), f64(v))
        assert np.abs(out.data - attention_oracle(q, k, v)).max() < 1e-12

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(3)
        q, k = rng.standard_normal((6, 5)), rng.standard_normal((9, 5))
        # attending over the identity recovers the weight matrix itself
        w = scaled_dot_attention(f64(q), f64(k), f64(np.eye(9))).data
        assert (w >= 0).all()
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6

    def test_shape_and_argument_errors(self):
        with pytest.raises(ShapeError):
            scaled_dot_attention(f64(np.ones((2, 3))), f64(np.ones((2, 4))), f64(np.ones((2, 2))))
        with pytest.raises(ShapeError):
            scaled_dot_attention(f64(np.ones((2, 3))), f64(np.ones((4, 3))), f64(np.ones((3, 2))))
        with pytest.raises(InvalidArgumentError):
            scaled_dot_attention(f64(np.ones((2, 0))), f64(np.ones((2, 0))), f64(np.ones((2, 2))))


class TestSoftmax:
    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 7))
        shifted = x + rng.standard_normal((5, 1))  # per-row constant
        a = T.row_softmax(f64(x)).data
        b = T.row_softmax(f64(shifted)).data
        assert np.abs(a - b).max() < 1e-6

    def test_extreme_logits_stay_finite(self):
        x = f64([[1e4, -1e4, 0.0]])
        out = T.row_softmax(x).data
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-12


class TestLayerNorm:
    def gb(self, d):
        return f64(np.ones((1, d))), f64(np.zeros((1, d)))

    def test_constant_row_collapses_to_beta(self):
        g, b = self.gb(3)
        out = layer_norm(f64([[5.0, 5.0, 5.0]]), g, b, eps=1e-5)
        assert np.abs(out.data).max() < 1e-12

    def test_two_point_row(self):
        g, b = self.gb(2)
        out = layer_norm(f64([[1.0, 3.0]]), g, b, eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6))
        c = rng.standard_normal((4, 1))
        g, b = self.gb(6)
        a = layer_norm(f64(x), g, b, eps=1e-5).data
        bb = layer_norm(f64(x + c), g, b, eps=1e-5).data
        assert np.abs(a - bb).max() < 1e-6

    def test_non_finite_input_raises(self):
        g, b = self.gb(2)
        with pytest.raises(NumericError):
            layer_norm(f64([[np.nan, 1.0]]), g, b, eps=1e-5)

    def test_affine_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(f64(np.ones((2, 3))), f64(np.ones((1, 2))), f64(np.zeros((1, 2))), 1e-5)


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


class TestMlp:
    def test_zero_weights_yield_bias(self):
        w = f64(np.zeros((3, 2)))
        b = f64([[0.5, -1.0]])
        out = mlp_forward(f64(np.ones((4, 3))), [(w, b, "identity")])
        assert np.allclose(out.data, np.tile([0.5, -1.0], (4, 1)), atol=0)

    def test_identity_layer_preserves_input(self):
        x = np.random.default_rng(2).standard_normal((5, 4))
        out = mlp_forward(f64(x), [(f64(np.eye(4)), f64(np.zeros((1, 4))), "identity")])
        assert np.array_equal(out.data, x)

    def test_two_layer_gelu_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))
        w0, b0 = rng.standard_normal((4, 5)), rng.standard_normal((1, 5))
        w1, b1 = rng.standard_normal((5, 2)), rng.standard_normal((1, 2))
        out = mlp_forward(f64(x), [(f64(w0), f64(b0), "gelu"), (f64(w1), f64(b1), "identity")])
        expect = np.zeros((3, 2))
        for i in range(3):
            hidden = [gelu_scalar(sum(x[i, a] * w0[a, j] for a in range(4)) + b0[0, j]) for j in range(5)]
            for c in range(2):
                expect[i, c] = sum(hidden[j] * w1[j, c] for j in range(5)) + b1[0, c]
        assert np.abs(out.data - expect).max() < 1e-12

    def test_width_mismatch_raises(self):
        with pytest.raises(ShapeError):
            mlp_forward(f64(np.ones((2, 3))), [(f64(np.ones((4, 2))), None, "identity")])

    def test_unknown_activation_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Mlp([(f64(np.ones((2, 2))), None, "tanhish")])


class TestGradcheck:
    def test_square_function(self):
        store = ParamStore()
        store.add("x", f64([[3.0]]))

        def f(p):
            return T.mul(p["x"], p["x"])

        err = gradcheck(f, store, h=1e-5)
        assert err < 1e-8
        store.zero_grads()
        loss = f(store)
        loss.backward()
        assert abs(store["x"].grad[0, 0] - 6.0) < 1e-10

    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(5)
        store = ParamStore()
        store.add("x", f64(rng.standard_normal((3, 4))))
        store.add("gamma", f64(rng.standard_normal((1, 4))))
        store.add("beta", f64(rng.standard_normal((1, 4))))

        def f(p):
            return T.sum_all(layer_norm(p["x"], p["gamma"], p["beta"], eps=1e-5))

        assert gradcheck(f, store, h=1e-5) < 1e-6

    def test_composite_op_gradients(self):
        rng = np.random.default_rng(9)
        store = ParamStore()
        store.add("a", f64(rng.standard_normal((4, 3))))
        store.add("b", f64(rng.standard_normal((3, 4))))
        store.add("c", f64(rng.uniform(0.5, 1.5, (1, 4))))
        store.add("gate", f64([[0.3]]))

        def f(p):
            y = T.matmul(p["a"], p["b"])
            y = T.div(y, p["c"])
            y = T.concat_cols([T.abs_(y), T.relu(y)])
            y = T.slice_cols(y, 1, 6)
            z = T.mean_concat(y, T.sigmoid(y))
            mix = T.convex_mix(T.sigmoid(p["gate"]), y, T.gelu(y))
            seg = Segments([0, 2, 2], [2, 0, 2], 3)
            sm = T.segment_mean(mix, seg)
            return T.add(T.sum_all(sm), T.add(T.sum_all(z), T.sum_all(T.max_rows(y))))

        assert gradcheck(f, store, h=1e-5) < 1e-6

    def test_attention_and_slice_op_gradients(self):
        rng = np.random.default_rng(13)
        store = ParamStore()
        store.add("h", f64(rng.standard_normal((5, 4)) * 0.5))
        store.add("ws", f64(rng.standard_normal((4, 3)) * 0.5))
        store.add("wq", f64(rng.standard_normal((4, 4)) * 0.5))
        store.add("wk", f64(rng.standard_normal((4, 4)) * 0.5))
        store.add("wv", f64(rng.standard_normal((4, 4)) * 0.5))
        store.add("c", f64(rng.standard_normal((3, 4)) * 0.5))

        def f(p):
            sa = T.state_attention(p["h"], p["ws"], p["wq"], p["wk"], p["wv"], 1e-8)
            ca = T.projected_cross_attention(p["h"], p["c"], p["wq"], p["wk"], p["wv"])
            w = T.row_softmax(T.matmul(p["h"], p["ws"]))
            z = T.slice_aggregate(w, p["h"])
            extra = T.matmul(T.transpose(z), z)
            return T.add(T.sum_all(T.sub(sa, ca)), T.sum_all(T.mean_rows(extra)))

        assert gradcheck(f, store, h=1e-5) < 1e-6

    def test_non_finite_objective_raises(self):
        store = ParamStore()
        store.add("x", f64([[0.0]]))

        def f(p):
            with np.errstate(invalid="ignore"):
                return T.div(p["x"], p["x"])  # 0/0

        with pytest.raises(NumericError):
            gradcheck(f, store)


class TestDeterminismAndPrecision:
    def test_forward_ops_bit_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 5)).astype(np.float32)
        w = rng.standard_normal((5, 5)).astype(np.float32)
        a = T.linear_act(Tensor(x), Tensor(w), None, "gelu").data
        b = T.linear_act(Tensor(x), Tensor(w), None, "gelu").data
        assert np.array_equal(a, b)

    def test_default_dtype_switch(self):
        with T.using_dtype(np.float64):
            assert Tensor([[1, 2]]).dtype == np.float64
        assert Tensor([[1, 2]]).dtype == np.float32

    def test_param_store_orders_by_name(self):
        store = ParamStore()
        store.create("b", (1, 1), seed=0)
        store.create("a", (1, 1), seed=0)
        assert store.names() == ["a", "b"]

    def test_duplicate_parameter_rejected(self):
        store = ParamStore()
        store.create("a", (1, 1), seed=0)
        with pytest.raises(InvalidArgumentError):
            store.create("a", (1, 1), seed=0)


class TestCanonicalReductions:
    def test_mean_rows_permutation_exact(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((50, 7))
        perm = rng.permutation(50)
        a = T.mean_rows(f64(x)).data
        b = T.mean_rows(f64(x[perm])).data
        assert np.array_equal(a, b)

    def test_slice_aggregate_permutation_exact(self):
        rng = np.random.default_rng(12)
        w = rng.uniform(0, 1, (40, 5))
        h = rng.standard_normal((40, 6))
        perm = rng.permutation(40)
        a = T.slice_aggregate(f64(w), f64(h)).data
        b = T.slice_aggregate(f64(w[perm]), f64(h[perm])).data
        assert np.array_equal(a, b)

    def test_segment_mean_respects_empty_segments(self):
        x = f64([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        seg = Segments([0, 2, 2], [2, 0, 1], 3)
        out = T.segment_mean(x, seg).data
        assert np.allclose(out, [[2.0, 3.0], [0.0, 0.0], [5.0, 6.0]], atol=0)

    def test_pool_empty_rows_raise(self):
        with pytest.raises(EmptyInputError):
            T.mean_rows(f64(np.zeros((0, 3))))
