import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from otml.cvsim import CvSimParams, cross_attend, init_cvsim_params, make_marginals
from otml.exceptions import ConfigurationError, DimensionError
from otml.tensor import Tensor


def params(wq, wk, wv, n_heads, n_tokens):
    return CvSimParams(Tensor(wq), Tensor(wk), Tensor(wv), n_heads=n_heads, n_tokens=n_tokens)


def mp_softmax(values):
    exps = [mp.exp(v) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def mp_cross_attend(g_src, g_tgt, wq, wk, wv, n_tokens):
    """Single-head reference evaluated with 50-digit arithmetic."""
    mp.dps = 50
    d = len(g_src)
    width = d // n_tokens

    def project(w, x):
        return [sum(mpf(w[i][j]) * mpf(x[j]) for j in range(d)) for i in range(d)]

    q, k, v = project(wq, g_src), project(wk, g_tgt), project(wv, g_tgt)
    out = []
    for a in range(n_tokens):
        qa = q[a * width : (a + 1) * width]
        scores = [
            sum(qa[i] * k[b * width + i] for i in range(width)) / mp.sqrt(width) for b in range(n_tokens)
        ]
        weights = mp_softmax(scores)
        for i in range(width):
            out.append(sum(weights[b] * v[b * width + i] for b in range(n_tokens)))
    return np.array([float(x) for x in out])


class TestCrossAttend:
    def test_zero_value_path(self):
        rng = np.random.default_rng(0)
        p = params(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), np.zeros((8, 8)), 2, 2)
        out = cross_attend(rng.standard_normal(8), rng.standard_normal(8), p)
        np.testing.assert_array_equal(out.data, np.zeros(8))

    def test_single_token_reduces_to_value_projection(self):
        rng = np.random.default_rng(1)
        wv = rng.standard_normal((4, 4))
        p = params(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)), wv, 1, 1)
        g_src, g_tgt = rng.standard_normal(4), rng.standard_normal(4)
        out, attention = cross_attend(g_src, g_tgt, p, return_attention=True)
        np.testing.assert_array_equal(attention.data, np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(out.data, wv @ g_tgt, rtol=1e-14)

    def test_hand_set_weights_match_extended_precision(self):
        wq = np.array([[0.5, -0.2, 0.1, 0.0], [0.3, 0.4, -0.1, 0.2], [0.0, 0.1, 0.6, -0.3], [0.2, 0.0, 0.1, 0.5]])
        wk = np.array([[0.1, 0.2, 0.0, -0.4], [0.0, 0.3, 0.5, 0.1], [-0.2, 0.1, 0.2, 0.3], [0.4, -0.1, 0.0, 0.2]])
        wv = np.array([[1.0, 0.0, 0.5, 0.0], [0.0, -1.0, 0.0, 0.5], [0.25, 0.0, 1.0, 0.0], [0.0, 0.5, 0.0, -1.0]])
        g_src = np.array([0.3, -1.2, 0.8, 2.0])
        g_tgt = np.array([1.5, 0.2, -0.7, 0.4])
        out = cross_attend(g_src, g_tgt, params(wq, wk, wv, 1, 2)).data
        np.testing.assert_allclose(out, mp_cross_attend(g_src, g_tgt, wq, wk, wv, 2), rtol=1e-13)

    def test_batch_matches_rows(self):
        p = init_cvsim_params(16, n_tokens=4, n_heads=2, rng=3)
        rng = np.random.default_rng(3)
        src, tgt = rng.standard_normal((5, 16)), rng.standard_normal((5, 16))
        batch = cross_attend(src, tgt, p).data
        for i in range(5):
            np.testing.assert_allclose(batch[i], cross_attend(src[i], tgt[i], p).data, rtol=1e-13, atol=1e-15)

    def test_divisibility_violations(self):
        with pytest.raises(ConfigurationError):
            init_cvsim_params(10, n_tokens=4, n_heads=1)
        with pytest.raises(ConfigurationError):
            init_cvsim_params(8, n_tokens=4, n_heads=3)

    def test_shape_mismatch(self):
        p = init_cvsim_params(8, n_tokens=2, n_heads=2, rng=0)
        with pytest.raises(DimensionError):
            cross_attend(np.ones(8), np.ones(6), p)


class TestMarginals:
    def test_zero_value_weights_give_uniform(self):
        p = params(np.eye(4), np.eye(4), np.zeros((4, 4)), 1, 2)
        pair = make_marginals(np.arange(4.0), np.ones(4), p, p)
        np.testing.assert_allclose(pair.mu.data, np.full(4, 0.25), rtol=1e-15)
        np.testing.assert_allclose(pair.nu.data, np.full(4, 0.25), rtol=1e-15)

    def test_high_temperature_limit(self):
        p = init_cvsim_params(8, n_tokens=2, n_heads=2, rng=4)
        rng = np.random.default_rng(4)
        pair = make_marginals(rng.standard_normal(8) * 5, rng.standard_normal(8) * 5, p, p, temperature=1e6)
        assert np.max(np.abs(pair.mu.data - 1 / 8)) <= 1e-3
        assert np.max(np.abs(pair.nu.data - 1 / 8)) <= 1e-3

    def test_small_weights_match_softmax_oracle(self):
        rng = np.random.default_rng(5)
        ps = params(*(rng.uniform(-0.3, 0.3, (4, 4)) for _ in range(3)), 1, 2)
        pt = params(*(rng.uniform(-0.3, 0.3, (4, 4)) for _ in range(3)), 1, 2)
        g_s, g_t = rng.standard_normal(4), rng.standard_normal(4)
        pair = make_marginals(g_s, g_t, ps, pt, temperature=0.5)
        for refined, weights, src, tgt in ((pair.mu, ps, g_s, g_t), (pair.nu, pt, g_t, g_s)):
            r = mp_cross_attend(src, tgt, weights.w_query.data, weights.w_key.data, weights.w_value.data, 2)
            expected = [float(v) for v in mp_softmax([mpf(x) / mpf("0.5") for x in r])]
            np.testing.assert_allclose(refined.data, expected, rtol=1e-13)

    def test_nonpositive_temperature(self):
        p = init_cvsim_params(8, n_tokens=2, n_heads=2, rng=0)
        with pytest.raises(ConfigurationError):
            make_marginals(np.ones(8), np.ones(8), p, p, temperature=0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20.0))
def test_marginals_are_strictly_positive_distributions(seed, temperature):
    rng = np.random.default_rng(seed)
    ps = init_cvsim_params(16, n_tokens=4, n_heads=2, rng=rng)
    pt = init_cvsim_params(16, n_tokens=4, n_heads=2, rng=rng)
    pair = make_marginals(rng.standard_normal((3, 16)), rng.standard_normal((3, 16)), ps, pt, temperature)
    for m in (pair.mu.data, pair.nu.data):
        assert np.all(m > 0)
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-12)
