import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtnet import autodiff as ad
from gtnet import nn
from gtnet.errors import ConstraintError, ShapeError
from gtnet.pipeline.config import ModelConfig
from gtnet.tucker import (
    TBAParams,
    TuckerCore,
    bilinear_full,
    bilinear_fuse,
    bilinear_fuse_columns,
    hosvd,
    l1_core_penalty,
    self_attention_gate,
    tba_forward,
    tucker_reconstruct,
    tucker_to_tensor,
)


def make_params(core, w_q, w_v, w_o, k_cat=None, restore=None, l1_weight=1e-4):
    core = np.asarray(core, dtype=float)
    w_o = np.asarray(w_o, dtype=float)
    if restore is None:
        restore = nn.LinearParams(ad.parameter(np.eye(w_o.shape[0])), ad.parameter(np.zeros(w_o.shape[0])))
    k_cat = max(core.shape[:2]) if k_cat is None else k_cat
    return TBAParams(
        TuckerCore(ad.parameter(core), k_cat),
        ad.parameter(w_q),
        ad.parameter(w_v),
        ad.parameter(w_o),
        restore,
        l1_weight,
    )


def random_params(seed, dims, ranks, channels=None):
    rng = np.random.default_rng(seed)
    i, j, k = dims
    p = TBAParams.init(rng, i, j, ranks, k_cat=max(ranks[:2]), k_out=k, channels=channels)
    p.core.gamma_c.value = rng.normal(size=ranks)
    p.restore.bias.value = rng.normal(size=p.restore.bias.shape)
    return p


class TestBilinearFull:
    def test_zero_gamma(self):
        assert np.all(bilinear_full([1.0, 2.0], [3.0], np.zeros((2, 1, 4))).value == 0.0)

    def test_scalar(self):
        assert bilinear_full([3.0], [4.0], np.full((1, 1, 1), 2.0)).value[0] == 24.0

    def test_triple_loop(self):
        rng = np.random.default_rng(0)
        g, q, v = rng.normal(size=(3, 4, 2)), rng.normal(size=3), rng.normal(size=4)
        expected = np.zeros(2)
        for i in range(3):
            for j in range(4):
                for k in range(2):
                    expected[k] += g[i, j, k] * q[i] * v[j]
        np.testing.assert_allclose(bilinear_full(q, v, g).value, expected, atol=1e-13, rtol=0)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            bilinear_full(np.ones(2), np.ones(3), np.ones((2, 2, 1)))


class TestReconstruct:
    def test_zero_core(self):
        p = random_params(1, (3, 4, 2), (2, 2, 2))
        p.core.gamma_c.value = np.zeros((2, 2, 2))
        assert np.all(tucker_reconstruct(p).value == 0.0)

    def test_scalar_chain(self):
        p = make_params([[[2.0]]], [[3.0]], [[4.0]], [[5.0]])
        assert tucker_reconstruct(p).value.item() == 120.0

    def test_identity_factors(self):
        core = np.random.default_rng(2).normal(size=(2, 3, 4))
        p = make_params(core, np.eye(2), np.eye(3), np.eye(4), k_cat=3)
        np.testing.assert_array_equal(tucker_reconstruct(p).value, core)


class TestBilinearFuse:
    def test_hand_contraction(self):
        p = make_params([[[0.5]]], [[1.0], [1.0]], [[1.0], [1.0]], [[2.0]])
        y, q_t, v_t = bilinear_fuse([1.0, 2.0], [3.0, 4.0], p, return_latent=True)
        assert q_t.value.tolist() == [3.0]
        assert v_t.value.tolist() == [7.0]
        assert y.value.tolist() == [21.0]
        assert bilinear_full([1.0, 2.0], [3.0, 4.0], tucker_reconstruct(p)).value.tolist() == [21.0]

    def test_zero_core(self):
        p = random_params(3, (4, 3, 5), (2, 3, 2))
        p.core.gamma_c.value = np.zeros_like(p.core.gamma_c.value)
        assert np.all(bilinear_fuse(np.ones(4), np.ones(3), p).value == 0.0)

    def test_columns_match_vectors(self):
        p = random_params(4, (4, 3, 5), (2, 3, 2))
        rng = np.random.default_rng(5)
        qs, vs = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        cols = bilinear_fuse_columns(qs, vs, p).value
        for n in range(6):
            np.testing.assert_allclose(cols[:, n], bilinear_fuse(qs[:, n], vs[:, n], p).value, atol=1e-13, rtol=0)

    def test_wrong_lengths(self):
        p = random_params(4, (4, 3, 5), (2, 3, 2))
        with pytest.raises(ShapeError):
            bilinear_fuse(np.ones(3), np.ones(3), p)


@settings(max_examples=60, deadline=None)
@given(
    i=st.integers(1, 8),
    j=st.integers(1, 8),
    k=st.integers(1, 8),
    p=st.integers(1, 4),
    q=st.integers(1, 4),
    r=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_factored_equals_full(i, j, k, p, q, r, seed):
    params = random_params(seed, (i, j, k), (p, q, r))
    rng = np.random.default_rng(seed + 1)
    qv, vv = rng.normal(size=i), rng.normal(size=j)
    lhs = bilinear_fuse(qv, vv, params).value
    rhs = bilinear_full(qv, vv, tucker_reconstruct(params)).value
    assert np.max(np.abs(lhs - rhs)) < 1e-10


class TestConstraints:
    def test_p_above_k_cat(self):
        with pytest.raises(ConstraintError):
            TuckerCore(ad.parameter(np.zeros((6, 5, 5))), 5)

    def test_q_above_k_cat(self):
        with pytest.raises(ConstraintError):
            TuckerCore(ad.parameter(np.zeros((5, 6, 5))), 5)

    def test_r_is_unconstrained(self):
        TuckerCore(ad.parameter(np.zeros((5, 5, 9))), 5)

    def test_init_enforces_rank(self):
        with pytest.raises(ConstraintError):
            TBAParams.init(np.random.default_rng(0), 8, 8, (4, 2, 2), k_cat=3)

    def test_negative_l1_weight(self):
        with pytest.raises(ConstraintError):
            TBAParams.init(np.random.default_rng(0), 2, 2, (1, 1, 1), k_cat=1, l1_weight=-1.0)

    def test_factor_shape_mismatch(self):
        with pytest.raises(ShapeError):
            make_params(np.zeros((2, 2, 2)), np.zeros((3, 1)), np.zeros((3, 2)), np.zeros((4, 2)))

    def test_default_config_compresses(self):
        cfg = ModelConfig()
        p = TBAParams.init(np.random.default_rng(0), cfg.c_fpn, cfg.c_fpn, cfg.ranks, cfg.k_cat, cfg.k_out_resolved)
        i, j, k = p.dims
        (pp, qq, rr) = p.core.ranks
        assert p.factored_size() == i * pp + j * qq + k * rr + pp * qq * rr
        assert p.factored_size() < p.full_size() == i * j * k


class TestL1Penalty:
    def test_hand_case(self):
        p = make_params(np.array([1.0, -2.0, 3.0]).reshape(1, 1, 3), [[1.0]], [[1.0]], np.ones((1, 3)), l1_weight=0.1)
        assert l1_core_penalty(p).item() == pytest.approx(0.6, abs=1e-15)

    def test_zero_cases(self):
        p = random_params(6, (3, 3, 3), (2, 2, 2))
        assert l1_core_penalty(TBAParams(p.core, p.w_q, p.w_v, p.w_o, p.restore, 0.0)).item() == 0.0
        p.core.gamma_c.value = np.zeros((2, 2, 2))
        assert l1_core_penalty(p).item() == 0.0

    def test_subgradient_zero_at_zero(self):
        p = make_params(np.array([0.0, -2.0, 3.0]).reshape(1, 1, 3), [[1.0]], [[1.0]], np.ones((1, 3)), l1_weight=0.5)
        with ad.Tape() as tape:
            loss = l1_core_penalty(p)
        tape.backward(loss)
        np.testing.assert_array_equal(p.core.gamma_c.grad.ravel(), [0.0, -0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 100.0))
    def test_nonnegative_and_homogeneous(self, seed, scale):
        p = random_params(seed, (3, 3, 3), (2, 2, 2))
        base = l1_core_penalty(p).item()
        assert base >= 0.0
        p.core.gamma_c.value = p.core.gamma_c.value * scale
        assert l1_core_penalty(p).item() == pytest.approx(scale * base, rel=1e-12, abs=1e-300)


class TestGate:
    def test_zero_map(self):
        assert np.all(self_attention_gate(np.zeros((2, 3, 3))).value == 0.0)

    def test_single_pixel(self):
        out = self_attention_gate(np.ones((1, 1, 1))).value.item()
        assert out == pytest.approx(1.0 / (1.0 + np.exp(-1.0)) + 1.0, abs=1e-15)
        assert out == pytest.approx(1.7311, abs=1e-4)

    def test_channel_scaled_by_its_max(self):
        f = np.random.default_rng(7).normal(size=(3, 4, 4))
        out = self_attention_gate(f).value
        for c in range(3):
            m = f[c].max()
            np.testing.assert_allclose(out[c], f[c] * (1.0 + 1.0 / (1.0 + np.exp(-m))), atol=1e-14, rtol=0)

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            self_attention_gate(np.zeros((3, 3)))


class TestTBAForward:
    def test_paper_shape(self):
        p = TBAParams.init(np.random.default_rng(0), 64, 64, (5, 5, 5), 5)
        assert tba_forward(np.zeros((64, 32, 32)), np.zeros((64, 16, 16)), p).shape == (64, 32, 32)

    def test_zero_core_bias(self):
        p = random_params(8, (3, 3, 4), (2, 2, 2), channels=3)
        p.core.gamma_c.value = np.zeros((2, 2, 2))
        b = np.array([0.5, -1.0, 2.0])
        p.restore.bias.value = b
        rng = np.random.default_rng(9)
        out = tba_forward(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 2, 2)), p).value
        gate = (1.0 + 1.0 / (1.0 + np.exp(-b))) * b
        np.testing.assert_allclose(out, np.broadcast_to(gate[:, None, None], out.shape), atol=1e-15, rtol=0)

    def test_positionwise_reference(self):
        p = random_params(10, (3, 2, 4), (2, 2, 3), channels=5)
        rng = np.random.default_rng(11)
        p2, p3 = rng.normal(size=(2, 4, 6)), rng.normal(size=(3, 2, 3))
        f_new = np.empty((5, 4, 6))
        for h in range(4):
            for w in range(6):
                y = bilinear_fuse(p3[:, h // 2, w // 2], p2[:, h, w], p).value
                f_new[:, h, w] = nn.linear(y, p.restore).value
        expected = self_attention_gate(f_new).value
        np.testing.assert_allclose(tba_forward(p2, p3, p).value, expected, atol=1e-12, rtol=0)

    def test_ratio_checked(self):
        p = random_params(0, (3, 3, 3), (2, 2, 2), channels=3)
        with pytest.raises(ShapeError):
            tba_forward(np.zeros((3, 4, 4)), np.zeros((3, 3, 2)), p)

    def test_gradients(self):
        p = random_params(12, (3, 3, 4), (2, 2, 2), channels=3)
        rng = np.random.default_rng(13)
        p2, p3 = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 2, 2))
        err = ad.grad_check(lambda: ad.sum(tba_forward(p2, p3, p)), list(p.variables().values()))
        assert err < 1e-4


class TestHOSVD:
    def test_zero_tensor(self):
        core, _ = hosvd(np.zeros((3, 4, 2)), (2, 2, 2))
        assert np.all(core == 0.0)

    def test_rank_one_exact(self):
        rng = np.random.default_rng(14)
        a, b, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=5)
        t = np.einsum("i,j,k->ijk", a, b, c)
        core, factors = hosvd(t, (1, 1, 1))
        np.testing.assert_allclose(tucker_to_tensor(core, factors), t, atol=1e-12, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(shape=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), seed=st.integers(0, 2**31 - 1))
    def test_full_rank_round_trip(self, shape, seed):
        t = np.random.default_rng(seed).normal(size=shape)
        core, factors = hosvd(t, shape)
        rel = np.linalg.norm(tucker_to_tensor(core, factors) - t) / np.linalg.norm(t)
        assert rel < 1e-8
        for u in factors:
            assert np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) < 1e-10

    def test_rank_too_large(self):
        with pytest.raises(ConstraintError):
            hosvd(np.zeros((2, 3, 4)), (3, 1, 1))

    def test_rank_count(self):
        with pytest.raises(ShapeError):
            hosvd(np.zeros((2, 3, 4)), (1, 1))
