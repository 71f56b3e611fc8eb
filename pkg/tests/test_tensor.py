import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtnet import tensor as T
from gtnet.errors import ShapeError


def loop_mode_product(t, m, mode):
    """Direct nested-loop definition of the mode-n product."""
    out_shape = list(t.shape)
    out_shape[mode] = m.shape[0]
    out = np.zeros(out_shape)
    for idx in itertools.product(*[range(s) for s in out_shape]):
        j = idx[mode]
        total = 0.0
        for i in range(t.shape[mode]):
            src = list(idx)
            src[mode] = i
            total += m[j, i] * t[tuple(src)]
        out[idx] = total
    return out


shapes = st.lists(st.integers(1, 6), min_size=1, max_size=4).map(tuple)


class TestModeProduct:
    def test_hand_case(self):
        out = T.mode_n_product(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0, 1.0]]), 0)
        np.testing.assert_array_equal(out, [[4.0, 6.0]])

    def test_shape_rule(self):
        out = T.mode_n_product(np.zeros((2, 3, 4)), np.zeros((5, 3)), 1)
        assert out.shape == (2, 5, 4)

    def test_mismatch_names_mode(self):
        with pytest.raises(ShapeError, match="mode 2"):
            T.mode_n_product(np.zeros((2, 3, 4)), np.zeros((5, 3)), 2)

    def test_bad_mode(self):
        with pytest.raises(ShapeError):
            T.mode_n_product(np.zeros((2, 3)), np.zeros((1, 2)), 2)

    @settings(max_examples=40, deadline=None)
    @given(shape=shapes, data=st.data())
    def test_identity(self, shape, data):
        rng = np.random.default_rng(len(shape))
        t = rng.normal(size=shape)
        mode = data.draw(st.integers(0, len(shape) - 1))
        np.testing.assert_array_equal(T.mode_n_product(t, np.eye(shape[mode]), mode), t)

    @settings(max_examples=40, deadline=None)
    @given(shape=shapes, j=st.integers(1, 5), k=st.integers(1, 5), seed=st.integers(0, 1000), data=st.data())
    def test_composition(self, shape, j, k, seed, data):
        rng = np.random.default_rng(seed)
        t = rng.normal(size=shape)
        mode = data.draw(st.integers(0, len(shape) - 1))
        a = rng.normal(size=(j, k))
        b = rng.normal(size=(k, shape[mode]))
        lhs = T.mode_n_product(t, a @ b, mode)
        rhs = T.mode_n_product(T.mode_n_product(t, b, mode), a, mode)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple), seed=st.integers(0, 1000), data=st.data())
    def test_matches_loop_and_unfold_route(self, shape, seed, data):
        rng = np.random.default_rng(seed)
        t = rng.normal(size=shape)
        mode = data.draw(st.integers(0, len(shape) - 1))
        m = rng.normal(size=(3, shape[mode]))
        direct = loop_mode_product(t, m, mode)
        out_shape = list(shape)
        out_shape[mode] = 3
        via_unfold = T.fold(m @ T.unfold(t, mode), mode, out_shape)
        np.testing.assert_allclose(T.mode_n_product(t, m, mode), direct, atol=1e-12, rtol=0)
        np.testing.assert_allclose(via_unfold, direct, atol=1e-12, rtol=0)

    def test_vector_product_drops_mode(self):
        t = np.arange(24.0).reshape(2, 3, 4)
        out = T.mode_n_vector_product(t, np.ones(3), 1)
        np.testing.assert_array_equal(out, t.sum(axis=1))


class TestUnfold:
    def test_shape(self):
        assert T.unfold(np.zeros((2, 3, 4)), 0).shape == (2, 12)

    def test_column_order_against_index_map(self):
        t = np.arange(1.0, 9.0).reshape(2, 2, 2)
        shape = t.shape
        for mode in range(3):
            expected = np.zeros((2, 4))
            for idx in itertools.product(range(2), range(2), range(2)):
                col, stride = 0, 1
                for k in range(3):
                    if k == mode:
                        continue
                    col += idx[k] * stride
                    stride *= shape[k]
                expected[idx[mode], col] = t[idx]
            np.testing.assert_array_equal(T.unfold(t, mode), expected)
        # mode 0 written out: rows (i=0, i=1), columns (j,k) = (0,0),(1,0),(0,1),(1,1)
        np.testing.assert_array_equal(T.unfold(t, 0), [[1, 3, 2, 4], [5, 7, 6, 8]])

    @settings(max_examples=50, deadline=None)
    @given(shape=shapes, seed=st.integers(0, 1000), data=st.data())
    def test_fold_inverts_unfold(self, shape, seed, data):
        t = np.random.default_rng(seed).normal(size=shape)
        mode = data.draw(st.integers(0, len(shape) - 1))
        back = T.fold(T.unfold(t, mode), mode, shape)
        assert back.tobytes() == t.tobytes()

    def test_fold_bad_shape(self):
        with pytest.raises(ShapeError):
            T.fold(np.zeros((2, 5)), 0, (2, 3, 2))


class TestElementwise:
    def test_tanh_zero(self):
        np.testing.assert_array_equal(T.tanh(np.zeros((2, 3))), np.zeros((2, 3)))

    def test_sigmoid_zero(self):
        np.testing.assert_array_equal(T.sigmoid(np.zeros(4)), np.full(4, 0.5))

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_channel_broadcast_against_loop(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        v = np.array([10.0, 100.0])
        expected = np.empty_like(x)
        for c in range(2):
            for h in range(2):
                for w in range(2):
                    expected[c, h, w] = x[c, h, w] * v[c]
        np.testing.assert_array_equal(T.mul(x, v), expected)
        np.testing.assert_array_equal(T.elementwise("mul", x, v), expected)

    def test_general_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            T.add(np.zeros((2, 3, 3)), np.zeros(3))
        with pytest.raises(ShapeError):
            T.mul(np.zeros((2, 3)), np.zeros((3,)))

    def test_relu_and_scalars(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(x), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.add_scalar(x, 1), [0.0, 1.0, 3.0])
        np.testing.assert_array_equal(T.mul_scalar(x, 2), [-2.0, 0.0, 4.0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.elementwise("cosh", np.zeros(1))

    def test_inputs_not_mutated(self):
        x = np.ones((2, 2, 2))
        before = x.copy()
        T.mul(x, np.array([2.0, 3.0]))
        T.relu(x)
        np.testing.assert_array_equal(x, before)


class TestGlobalMaxPool:
    def test_constant(self):
        np.testing.assert_array_equal(T.global_max_pool(np.full((3, 2, 2), 1.5)), [1.5, 1.5, 1.5])

    def test_single_channel(self):
        assert T.global_max_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == 4.0

    def test_against_scan(self):
        t = np.random.default_rng(3).normal(size=(3, 5, 5))
        expected = []
        for c in range(3):
            best = -np.inf
            for h in range(5):
                for w in range(5):
                    best = max(best, t[c, h, w])
            expected.append(best)
        np.testing.assert_array_equal(T.global_max_pool(t), expected)

    def test_rank_error(self):
        with pytest.raises(ShapeError):
            T.global_max_pool(np.zeros((2, 2)))


def test_as_tensor_rejects_empty_dims():
    with pytest.raises(ShapeError):
        T.as_tensor(np.zeros((2, 0)))
    assert T.as_tensor(3.0).shape == (1,)
