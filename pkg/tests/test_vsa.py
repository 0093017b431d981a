import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superpose import rng as srng
from superpose.vsa import (
    KeyKind,
    KeyVector,
    Superposition,
    UnbindMatrix,
    bind_hadamard,
    bind_pwhrr,
    circulant,
    circulant_inverse,
    circular_convolve,
    circular_correlate,
    dictionary_cleanup,
    gen_key,
    gen_keys,
    key_orthogonality_loss,
    superpose,
    unbind_hadamard,
    unbind_mbat,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def conv_oracle(a, x):
    d = len(a)
    return np.array([sum(a[j] * x[(i - j) % d] for j in range(d)) for i in range(d)])


def corr_oracle(a, y):
    d = len(a)
    return np.array([sum(a[j] * y[(i + j) % d] for j in range(d)) for i in range(d)])


class TestKeys:
    def test_bipolar_deterministic(self):
        k1 = gen_key(7, 4, KeyKind.BIPOLAR)
        k2 = gen_key(7, 4, KeyKind.BIPOLAR)
        assert set(np.unique(k1.entries)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(k1.entries, k2.entries)

    def test_gaussian_moments(self):
        d = 10_000
        k = gen_key(7, d, KeyKind.GAUSSIAN).entries
        sigma = 1 / math.sqrt(d)
        # mean of D draws with sd 1/sqrt(D) has standard error 1/D
        assert abs(k.mean()) < 4 * sigma / math.sqrt(d)
        assert abs(k.var() - 1 / d) < 0.05 / d

    def test_independent_seeds_quasi_orthogonal(self):
        d = 10_000
        # Hoeffding: P(|cos| >= 0.05) <= 2 exp(-D 0.05^2 / 2) = 7.5e-6 per pair
        for s in range(20):
            a = gen_key(s, d, KeyKind.BIPOLAR).entries
            b = gen_key(s + 1000, d, KeyKind.BIPOLAR).entries
            assert abs(a @ b) / d < 0.05

    def test_invalid_dim(self):
        with pytest.raises(ValueError):
            gen_key(0, 0)

    def test_bipolar_validation(self):
        with pytest.raises(ValueError):
            KeyVector(np.array([1.0, 0.5]), KeyKind.BIPOLAR)

    def test_entries_immutable(self):
        k = gen_key(1, 8)
        with pytest.raises(ValueError):
            k.entries[0] = 3.0

    def test_gen_keys_distinct(self):
        ks = gen_keys(3, 4, 64)
        assert len({tuple(k.entries) for k in ks}) == 4


class TestHadamard:
    def test_identity_key(self):
        x = np.array([0.3, -2.0, 5.0])
        np.testing.assert_array_equal(bind_hadamard(np.ones(3), x), x)

    def test_definition(self):
        np.testing.assert_array_equal(bind_hadamard([1, -1], [2, 3]), [2, -3])

    @given(arrays(np.float64, 32, elements=finite), st.integers(0, 2**31))
    def test_bipolar_involution_bitwise(self, x, seed):
        a = gen_key(seed, 32, KeyKind.BIPOLAR)
        np.testing.assert_array_equal(unbind_hadamard(a, bind_hadamard(a, x)), x)

    def test_gaussian_not_inverse(self):
        a = gen_key(2, 8, KeyKind.GAUSSIAN)
        y = np.arange(8.0)
        np.testing.assert_array_equal(unbind_hadamard(a, y), a.entries * y)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            bind_hadamard(np.ones(3), np.ones(4))


class TestCircular:
    def test_delta_identity(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(circular_convolve([1, 0, 0, 0], x), x)
        np.testing.assert_array_equal(circular_correlate([1, 0, 0, 0], x), x)

    def test_delta_shift(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(circular_convolve([0, 1, 0, 0], x), np.roll(x, 1))

    def test_small_values(self):
        assert conv_oracle([1, 2], [3, 4]).tolist() == [11, 10]
        assert corr_oracle([1, 2], [11, 10]).tolist() == [31, 32]
        np.testing.assert_array_equal(circular_convolve([1, 2], [3, 4]), [11, 10])
        np.testing.assert_array_equal(circular_correlate([1, 2], [11, 10]), [31, 32])

    @pytest.mark.parametrize("d", [1, 2, 5, 16, 33])
    def test_direct_matches_loop_oracle(self, d):
        g = np.random.default_rng(d)
        a, x = g.standard_normal((2, d))
        np.testing.assert_allclose(circular_convolve(a, x, "direct"), conv_oracle(a, x), atol=1e-12)
        np.testing.assert_allclose(circular_correlate(a, x, "direct"), corr_oracle(a, x), atol=1e-12)

    @pytest.mark.parametrize("d", [3, 64, 129, 1024])
    def test_fft_agrees_with_reference(self, d):
        g = np.random.default_rng(d)
        a, x = g.uniform(-1, 1, (2, d))
        assert np.max(np.abs(circular_convolve(a, x, "fft") - circular_convolve(a, x, "direct"))) < 1e-9
        assert np.max(np.abs(circular_correlate(a, x, "fft") - circular_correlate(a, x, "direct"))) < 1e-9

    @settings(max_examples=50)
    @given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
           arrays(np.float64, 12, elements=finite), finite)
    def test_bilinear_commutative(self, a, b, x, lam):
        tol = 1e-9 * (1 + np.abs(a).sum() * np.abs(x).sum() + np.abs(b).sum() * np.abs(x).sum()) * (1 + abs(lam))
        np.testing.assert_allclose(circular_convolve(a, x), circular_convolve(x, a), atol=tol)
        lhs = circular_convolve(lam * a + b, x)
        rhs = lam * circular_convolve(a, x) + circular_convolve(b, x)
        np.testing.assert_allclose(lhs, rhs, atol=tol)

    def test_correlation_approximate_inverse_improves_with_dim(self):
        # The L2 retrieval error stays near sqrt(1 + 1/D) for any D; what
        # concentrates is the projection onto x, which is what cleanup uses.
        proj_err, l2_err = [], []
        for d in (64, 256, 1024):
            pe, le = [], []
            for s in range(32):
                a = gen_key(s, d, KeyKind.GAUSSIAN, 0).entries
                x = srng.stream(s, 1).standard_normal(d)
                xr = circular_correlate(a, circular_convolve(a, x))
                pe.append(abs(xr @ x / (x @ x) - 1.0))
                le.append(np.linalg.norm(xr - x) / np.linalg.norm(x))
            proj_err.append(np.median(pe))
            l2_err.append(np.median(le))
        assert proj_err[0] > proj_err[1] > proj_err[2]
        np.testing.assert_allclose(l2_err, 1.0, atol=0.2)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            circular_convolve(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            circular_correlate(np.ones(3), np.ones(4))


class TestPwhrr:
    def test_delta_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3, 5))
        np.testing.assert_array_equal(bind_pwhrr([1, 0, 0, 0], x), x)

    def test_constant_field(self):
        fiber = np.array([1.0, -2.0, 0.5])
        x = np.broadcast_to(fiber[:, None, None], (3, 4, 4))
        out = bind_pwhrr([0.2, 1.0, -1.0], x)
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), atol=0)

    def test_small_value(self):
        out = bind_pwhrr([1, 2], np.array([3.0, 4.0]).reshape(2, 1, 1))
        np.testing.assert_array_equal(out.ravel(), [11, 10])

    @pytest.mark.parametrize("shift", [(1, 0), (0, 2), (3, 1)])
    def test_translation_equivariance(self, shift):
        g = np.random.default_rng(5)
        a = g.standard_normal(6)
        x = g.standard_normal((6, 5, 7))
        lhs = bind_pwhrr(a, np.roll(x, shift, axis=(1, 2)))
        rhs = np.roll(bind_pwhrr(a, x), shift, axis=(1, 2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_fiber_oracle(self):
        g = np.random.default_rng(9)
        a = g.standard_normal(5)
        x = g.standard_normal((5, 2, 3))
        out = bind_pwhrr(a, x)
        for h, w in itertools.product(range(2), range(3)):
            np.testing.assert_allclose(out[:, h, w], conv_oracle(a, x[:, h, w]), atol=1e-12)

    def test_key_dim_mismatch(self):
        with pytest.raises(ValueError):
            bind_pwhrr(np.ones(3), np.ones((4, 2, 2)))


class TestMbat:
    def test_identity(self):
        h = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(unbind_mbat(UnbindMatrix(np.eye(3)), h), h)

    def test_exact_circulant_inverse(self):
        for s in range(5):
            a = gen_key(s, 32, KeyKind.GAUSSIAN)
            x = srng.stream(s, 9).standard_normal(32)
            m = circulant_inverse(a)
            assert np.linalg.norm(unbind_mbat(m, circular_convolve(a, x)) - x) < 1e-8

    def test_inverts_pwhrr(self):
        a = gen_key(4, 16, KeyKind.GAUSSIAN)
        x = np.random.default_rng(2).standard_normal((16, 3, 3))
        bound = bind_pwhrr(a, x)
        m = circulant_inverse(a)
        rec = unbind_mbat(m, np.moveaxis(bound, 0, -1))
        assert np.max(np.abs(np.moveaxis(rec, -1, 0) - x)) < 1e-8

    def test_linearity(self):
        g = np.random.default_rng(3)
        m = UnbindMatrix(g.standard_normal((6, 6)))
        h = g.standard_normal(6)
        np.testing.assert_allclose(unbind_mbat(m, 2.5 * h), 2.5 * unbind_mbat(m, h), rtol=1e-14)
        assert np.all(np.isfinite(unbind_mbat(m, h)))

    def test_mismatch(self):
        with pytest.raises(ValueError):
            unbind_mbat(UnbindMatrix(np.eye(3)), np.ones(4))

    def test_non_square(self):
        with pytest.raises(ValueError):
            UnbindMatrix(np.ones((2, 3)))

    def test_circulant_matches_convolution(self):
        a = np.array([1.0, 2.0, 3.0])
        x = np.array([0.5, -1.0, 4.0])
        np.testing.assert_allclose(circulant(a) @ x, conv_oracle(a, x), atol=1e-12)


class TestSuperpose:
    def test_single(self):
        x = np.arange(4.0)
        s = superpose([x])
        np.testing.assert_array_equal(s.payload, x)
        assert s.channel_count == 1

    def test_additive_inverse(self):
        x = np.random.default_rng(0).standard_normal(5)
        np.testing.assert_array_equal(superpose([x, -x]).payload, 0.0)

    def test_sum_oracle(self):
        xs = np.random.default_rng(1).standard_normal((3, 7))
        expected = [sum(float(xs[i, d]) for i in range(3)) for d in range(7)]
        np.testing.assert_allclose(superpose(list(xs)).payload, expected, atol=1e-12)

    def test_bit_stable_fixed_order(self):
        xs = list(np.random.default_rng(2).standard_normal((5, 9)))
        np.testing.assert_array_equal(superpose(xs).payload, superpose(xs).payload)

    def test_order_independent_up_to_rounding(self):
        xs = list(np.random.default_rng(2).standard_normal((5, 9)))
        np.testing.assert_allclose(superpose(xs).payload, superpose(xs[::-1]).payload, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            superpose([])
        with pytest.raises(ValueError):
            superpose([np.ones(3), np.ones(4)])


class TestCleanup:
    def test_single_channel_exact(self):
        a = gen_key(1, 64, KeyKind.BIPOLAR)
        x = np.random.default_rng(0).standard_normal(64)
        idx, scores = dictionary_cleanup(bind_hadamard(a, x), a, [x])
        assert idx == 0
        assert scores[0] == pytest.approx(x @ x, rel=1e-14)

    def test_scaling(self):
        g = np.random.default_rng(4)
        a = gen_key(2, 32, KeyKind.BIPOLAR)
        s = g.standard_normal(32)
        dic = g.standard_normal((5, 32))
        i1, sc1 = dictionary_cleanup(s, a, dic)
        i2, sc2 = dictionary_cleanup(2 * s, a, dic)
        assert i1 == i2
        np.testing.assert_allclose(sc2, 2 * sc1, rtol=1e-14)

    def test_ties_lowest_index(self):
        idx, _ = dictionary_cleanup(np.ones(4), np.ones(4), [np.ones(4), np.ones(4)])
        assert idx == 0

    def test_empty_dictionary(self):
        with pytest.raises(ValueError):
            dictionary_cleanup(np.ones(4), np.ones(4), [])

    def test_superposition_object(self):
        a = gen_key(1, 16, KeyKind.BIPOLAR)
        x = np.arange(16.0)
        s = superpose([bind_hadamard(a, x)])
        assert dictionary_cleanup(s, a, [x])[0] == 0

    @pytest.mark.slow
    def test_retrieval_rate(self):
        d, n, trials = 1024, 3, 10_000
        g = srng.stream(11)
        hits = 0
        for t in range(trials):
            values = g.standard_normal((n, d))
            keys = srng.rademacher(g, (n, d))
            s = (keys * values).sum(axis=0)
            k = t % n
            idx, _ = dictionary_cleanup(s, keys[k], values)
            hits += idx == k
        assert hits / trials >= 0.99


class TestKeyOrthogonalityLoss:
    @staticmethod
    def oracle(keys, mu):
        n = len(keys)
        pair = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                ci = sum(keys[i][d] * keys[j][d] for d in range(len(keys[i])))
                ni = math.sqrt(sum(v * v for v in keys[i]))
                nj = math.sqrt(sum(v * v for v in keys[j]))
                pair += (ci / (ni * nj)) ** 2
        norm_term = sum((math.sqrt(sum(v * v for v in k)) - 1) ** 2 for k in keys)
        return (mu / math.comb(n, 2) * pair if n > 1 else 0.0) + mu / n * norm_term

    def test_orthonormal_zero(self):
        assert key_orthogonality_loss(list(np.eye(4)), 0.1) == 0.0

    def test_identical_unit(self):
        u = np.ones(4) / 2
        assert key_orthogonality_loss([u, u], 0.1) == pytest.approx(0.1, abs=1e-15)

    def test_single_key(self):
        assert key_orthogonality_loss([np.array([2.0, 0.0])], 1.0) == pytest.approx(1.0)

    def test_oracle(self):
        keys = list(np.random.default_rng(8).standard_normal((4, 64)))
        assert key_orthogonality_loss(keys, 0.1) == pytest.approx(self.oracle(keys, 0.1), abs=1e-12)

    @settings(max_examples=40)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)), st.floats(0, 5))
    def test_nonnegative(self, keys, mu):
        if np.any(np.linalg.norm(keys, axis=1) < 1e-6):
            return
        assert key_orthogonality_loss(list(keys), mu) >= 0.0

    def test_zero_iff_orthonormal(self):
        q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((8, 8)))
        assert key_orthogonality_loss(list(q[:3]), 1.0) < 1e-28
        skew = q[:3].copy()
        skew[0] += 0.01 * skew[1]
        assert key_orthogonality_loss(list(skew), 1.0) > 0

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            key_orthogonality_loss([np.zeros(3), np.ones(3)], 0.1)
