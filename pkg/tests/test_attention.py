import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from superpose import rng as srng
from superpose.attention import (
    AttentionInstance,
    ChannelGrid,
    FeatureKind,
    LayerKeys,
    LayerMode,
    RowKind,
    bind_grid,
    build_feature_map,
    exact_softmax_attention,
    favor_plus,
    favor_plus_s,
    grid_cell_keys,
    init_layer_params,
    joint_normalize,
    layer_feature_maps,
    layer_keys,
    mimoformer_layer,
    performer_layer,
    relu_kernel_closed_form,
    softmax_weights,
    unbind_attention_only,
)
from superpose.vsa import bind_hadamard

SOFT = FeatureKind.POSITIVE_SOFTMAX


def random_instance(seed, L, D, scale=1.0):
    g = srng.stream(seed)
    return AttentionInstance(*(g.standard_normal((L, D)) * scale for _ in range(3)))


def random_grid(seed, M, N, L, D):
    g = srng.stream(seed, 1)
    k = g.standard_normal((M, N, L, D)) * D**-0.25
    q = k + 0.5 * g.standard_normal((M, N, L, D)) * D**-0.25
    v = g.standard_normal((M, N, L, D))
    return ChannelGrid(k, q, v, grid_cell_keys(seed, M, N, D, 2))


def softmax_oracle(inst):
    L, D = inst.keys.shape
    out = np.zeros((L, D))
    for i in range(L):
        w = [math.exp(float(inst.keys[j] @ inst.queries[i]) / math.sqrt(D)) for j in range(L)]
        tot = sum(w)
        for j in range(L):
            out[i] += w[j] / tot * inst.values[j]
    return out


class TestExactSoftmax:
    def test_single_token(self):
        inst = random_instance(0, 1, 4)
        np.testing.assert_array_equal(exact_softmax_attention(inst), inst.values)

    def test_identical_keys(self):
        inst = random_instance(1, 5, 3)
        inst = AttentionInstance(np.tile(inst.keys[:1], (5, 1)), inst.queries, inst.values)
        out = exact_softmax_attention(inst)
        np.testing.assert_allclose(out, np.tile(inst.values.mean(axis=0), (5, 1)), atol=1e-12)

    def test_loop_oracle(self):
        inst = random_instance(2, 3, 2)
        np.testing.assert_allclose(exact_softmax_attention(inst), softmax_oracle(inst), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6), st.floats(0.1, 30))
    def test_stochastic_rows_and_hull(self, seed, L, D, scale):
        inst = random_instance(seed, L, D, scale)
        w = softmax_weights(inst)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        out = exact_softmax_attention(inst)
        assert np.all(out <= inst.values.max(axis=0) + 1e-9)
        assert np.all(out >= inst.values.min(axis=0) - 1e-9)

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError):
            AttentionInstance(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))
        with pytest.raises(ValueError):
            AttentionInstance(np.ones((2, 3)), np.full((2, 3), np.nan), np.ones((2, 3)))


class TestFeatureMap:
    def test_zero_input(self):
        relu = build_feature_map(0, 16, 4, FeatureKind.RELU)
        soft = build_feature_map(0, 16, 4, SOFT)
        np.testing.assert_array_equal(relu(np.zeros(4)), np.zeros(16))
        np.testing.assert_allclose(soft(np.zeros(4)), np.full(16, 1 / 4), atol=1e-15)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            build_feature_map(0, 0, 4)
        with pytest.raises(ValueError):
            build_feature_map(0, 4, 0)
        with pytest.raises(ValueError):
            build_feature_map(0, 4, 3)(np.ones(2))

    def test_deterministic(self):
        a = build_feature_map(5, 40, 8, SOFT, RowKind.ORTHOGONAL, 1, 2)
        b = build_feature_map(5, 40, 8, SOFT, RowKind.ORTHOGONAL, 1, 2)
        np.testing.assert_array_equal(a.projection, b.projection)

    def test_orthogonal_blocks(self):
        d, r = 8, 28  # three full blocks and a partial one
        w = build_feature_map(3, r, d, rows=RowKind.ORTHOGONAL).projection
        unit = w / np.linalg.norm(w, axis=1, keepdims=True)
        for start in range(0, r, d):
            blk = unit[start:start + d]
            off = blk @ blk.T - np.eye(len(blk))
            assert np.max(np.abs(off)) < 1e-8

    @pytest.mark.parametrize("rows", list(RowKind))
    def test_row_norms_chi(self, rows):
        d = 6
        w = build_feature_map(11, 4000, d, rows=rows).projection
        assert stats.kstest(np.linalg.norm(w, axis=1), stats.chi(d).cdf).pvalue > 0.01

    @pytest.mark.slow
    def test_positive_softmax_unbiased(self):
        d = 8
        g = srng.stream(99)
        k = srng.unit_sphere(g, d) * 0.8
        q = srng.unit_sphere(g, d) * 0.9
        vals = np.empty(100_000)
        for s in range(vals.size):
            fm = build_feature_map(s, 1, d, SOFT, RowKind.IID)
            vals[s] = fm(k) @ fm(q)
        target = math.exp(float(k @ q) / math.sqrt(d))
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - target) < 2 * se


class TestReluKernel:
    def test_analytic_points(self):
        x = np.array([0.6, 0.8])
        y = np.array([-0.8, 0.6])
        assert relu_kernel_closed_form(x, x) == pytest.approx(0.5, abs=1e-12)
        assert relu_kernel_closed_form(x, y) == pytest.approx(1 / (2 * math.pi), abs=1e-12)
        assert relu_kernel_closed_form(x, -x) == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            relu_kernel_closed_form(np.zeros(3), np.ones(3))

    def test_monte_carlo(self):
        g = srng.stream(4)
        w = g.standard_normal((400_000, 5))
        for s in range(4):
            x, y = g.standard_normal(5), g.standard_normal(5)
            mc = np.mean(np.maximum(w @ x, 0) * np.maximum(w @ y, 0))
            assert mc == pytest.approx(relu_kernel_closed_form(x, y), rel=0.02)

    @given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-math.pi, math.pi))
    def test_symmetry_and_positivity(self, a, b, theta):
        x = np.array([a, 0.0])
        y = b * np.array([math.cos(theta), math.sin(theta)])
        k = relu_kernel_closed_form(x, y)
        assert k >= -1e-12
        assert k == pytest.approx(relu_kernel_closed_form(y, x), rel=1e-12, abs=1e-15)


class TestFavorPlus:
    def test_zero_keys_average(self):
        inst = random_instance(0, 6, 4)
        inst = AttentionInstance(np.zeros((6, 4)), inst.queries, inst.values)
        out = favor_plus(inst, build_feature_map(1, 32, 4, SOFT)).output
        np.testing.assert_allclose(out, np.tile(inst.values.mean(axis=0), (6, 1)), atol=1e-12)

    def test_single_token(self):
        inst = random_instance(1, 1, 4)
        out = favor_plus(inst, build_feature_map(1, 32, 4, SOFT)).output
        np.testing.assert_allclose(out, inst.values, atol=1e-12)

    def test_permutation_invariance(self):
        inst = random_instance(2, 7, 4, 0.5)
        fm = build_feature_map(2, 64, 4, SOFT)
        perm = srng.stream(3).permutation(7)
        shuffled = AttentionInstance(inst.keys[perm], inst.queries, inst.values[perm])
        np.testing.assert_allclose(favor_plus(inst, fm).output, favor_plus(shuffled, fm).output, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            favor_plus(random_instance(0, 3, 4), build_feature_map(0, 8, 5))

    def test_relu_floor_flag(self):
        fm = build_feature_map(0, 4, 2, FeatureKind.RELU)
        inst = AttentionInstance(np.zeros((3, 2)), np.ones((3, 2)), np.ones((3, 2)))
        res = favor_plus(inst, fm)
        assert res.floored
        assert np.all(np.isfinite(res.output))
        np.testing.assert_array_equal(res.output, 0.0)

    def test_converges_with_features(self):
        devs = []
        for r in (2**8, 2**10, 2**12):
            per_seed = []
            for s in range(6):
                g = srng.stream(s, 5)
                inst = AttentionInstance(srng.unit_sphere(g, (16, 8)) * 0.9,
                                         srng.unit_sphere(g, (16, 8)) * 0.9, g.standard_normal((16, 8)))
                approx = favor_plus(inst, build_feature_map(s, r, 8, SOFT)).output
                exact = exact_softmax_attention(inst)
                per_seed.append(np.max(np.abs(approx - exact) / np.abs(exact)))
            devs.append(np.median(per_seed))
        assert devs[0] > devs[1] > devs[2]


class TestGrid:
    def test_all_ones_binding(self):
        grid = random_grid(0, 2, 3, 4, 8)
        ones = ChannelGrid(grid.keys, grid.queries, grid.values, np.ones((2, 3, 8)))
        b = bind_grid(ones)
        np.testing.assert_array_equal(b.keys, grid.keys)
        np.testing.assert_array_equal(b.values, grid.values)

    def test_involution(self):
        grid = random_grid(1, 2, 2, 3, 8)
        twice = bind_grid(bind_grid(grid))
        for name in ("keys", "queries", "values"):
            np.testing.assert_array_equal(getattr(twice, name), getattr(grid, name))

    def test_fiber_delegate(self):
        grid = random_grid(2, 2, 2, 5, 8)
        b = bind_grid(grid)
        np.testing.assert_array_equal(b.queries[1, 0, 3], bind_hadamard(grid.cell_keys[1, 0], grid.queries[1, 0, 3]))

    def test_bad_keys(self):
        grid = random_grid(3, 2, 2, 3, 4)
        with pytest.raises(ValueError):
            ChannelGrid(grid.keys, grid.queries, grid.values, np.full((2, 2, 4), 0.5))
        with pytest.raises(ValueError):
            ChannelGrid(grid.keys, grid.queries, grid.values, np.ones((2, 2, 3)))


def straight_line_unbind(bound, fm):
    """Recompute each channel from scratch with no shared sums."""
    M, N, L, D = bound.shape
    out = np.zeros((M, N, L, D))
    for m in range(M):
        for n in range(N):
            for i in range(L):
                qf = fm(sum(bound.queries[t, n, i] for t in range(M)))
                num = np.zeros(D)
                den = 0.0
                for u in range(M):
                    for j in range(L):
                        kf = fm(sum(bound.keys[u, w, j] for w in range(N)))
                        vs = sum(bound.values[u, w, j] for w in range(N))
                        num += vs * float(kf @ qf)
                        if u == m:
                            den += float(kf @ qf)
                out[m, n, i] = num * bound.cell_keys[m, n] / den
    return out


class TestFavorS:
    def test_degenerate_grid(self):
        inst = random_instance(4, 6, 8, 0.4)
        fm = build_feature_map(4, 64, 8, SOFT)
        grid = ChannelGrid(inst.keys[None, None], inst.queries[None, None], inst.values[None, None], np.ones((1, 1, 8)))
        res = favor_plus_s(bind_grid(grid), fm)
        ref = favor_plus(inst, fm)
        out, _ = unbind_attention_only(res.S, res.B, grid.cell_keys)
        np.testing.assert_allclose(res.B[0, 0], ref.denominator, atol=1e-12)
        np.testing.assert_allclose(res.S[0], ref.output * ref.denominator[:, None], atol=1e-12)
        np.testing.assert_allclose(out[0, 0], ref.output, atol=1e-12)

    def test_straight_line_oracle(self):
        grid = bind_grid(random_grid(5, 2, 2, 4, 8))
        fm = build_feature_map(5, 32, 8, SOFT)
        res = favor_plus_s(grid, fm)
        out, floored = unbind_attention_only(res.S, res.B, grid.cell_keys)
        assert not floored
        np.testing.assert_allclose(out, straight_line_unbind(grid, fm), rtol=1e-10, atol=1e-12)

    def test_positive_denominators(self):
        res = favor_plus_s(bind_grid(random_grid(6, 2, 3, 5, 8)), build_feature_map(6, 16, 8, SOFT))
        assert np.all(res.B > 0)

    def test_value_scaling(self):
        grid = bind_grid(random_grid(7, 2, 2, 4, 8))
        fm = build_feature_map(7, 32, 8, SOFT)
        scaled = ChannelGrid(grid.keys, grid.queries, 3.5 * grid.values, grid.cell_keys)
        a, _ = unbind_attention_only(*favor_plus_s(grid, fm)[:2], grid.cell_keys)
        b, _ = unbind_attention_only(*favor_plus_s(scaled, fm)[:2], grid.cell_keys)
        np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12)

    def test_joint_normalize(self):
        grid = bind_grid(random_grid(8, 3, 2, 4, 8))
        res = favor_plus_s(grid, build_feature_map(8, 32, 8, SOFT))
        got = joint_normalize(res.S, res.B)
        for n in range(2):
            for i in range(4):
                np.testing.assert_allclose(got[n, i], res.S[n, i] / sum(res.B[m, n, i] for m in range(3)), atol=1e-12)

    def test_joint_normalize_single_row(self):
        grid = bind_grid(random_grid(9, 1, 3, 4, 8))
        res = favor_plus_s(grid, build_feature_map(9, 32, 8, SOFT))
        per, _ = unbind_attention_only(res.S, res.B, np.ones_like(grid.cell_keys))
        np.testing.assert_allclose(joint_normalize(res.S, res.B), per[0], atol=1e-12)

    def test_joint_normalize_equal_denominators(self):
        S = srng.stream(1).standard_normal((2, 3, 4))
        B = np.full((3, 2, 3), 0.7)
        np.testing.assert_allclose(joint_normalize(S, B), S / (3 * 0.7), atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            favor_plus_s(random_grid(0, 2, 2, 3, 8), build_feature_map(0, 8, 4))

    def test_cost_audit(self):
        L, D, R = 256, 64, 256
        grid = bind_grid(random_grid(10, 2, 2, L, D))
        fm = build_feature_map(10, R, D, SOFT)
        res = favor_plus_s(grid, fm)
        separate = sum(favor_plus(grid.cell(m, n), fm).multiplies for m in range(2) for n in range(2))
        assert res.multiplies <= 0.75 * separate

    @pytest.mark.parametrize("M,N,L,D,R", [(1, 1, 8, 8, 8), (2, 2, 16, 8, 64), (4, 4, 8, 16, 4), (3, 1, 4, 32, 256), (8, 8, 4, 8, 16)])
    def test_budget_constant(self, M, N, L, D, R):
        res = favor_plus_s(bind_grid(random_grid(0, M, N, L, D)), build_feature_map(0, R, D, SOFT))
        assert res.multiplies <= 4 * res.budget

    def test_projection_error_shrinks_with_dim(self):
        med = []
        for d in (64, 256, 1024):
            errs = []
            for s in range(4):
                grid = bind_grid(random_grid(20 + s, 2, 2, 8, d))
                fm = build_feature_map(s, 2048, d, SOFT)
                res = favor_plus_s(grid, fm)
                out, _ = unbind_attention_only(res.S, res.B, grid.cell_keys)
                for m in range(2):
                    for n in range(2):
                        o = favor_plus(grid.cell(m, n), fm).output * grid.cell_keys[m, n]
                        errs.append(abs(np.sum((out[m, n] - o) * o)) / np.sum(o * o))
            med.append(np.median(errs))
        assert med[0] > med[1] > med[2]

    def test_l2_crosstalk_floor(self):
        # unbinding leaves the other channels' values as sign-scrambled noise of
        # dimension-free relative size, so the full L2 error does not vanish
        for d in (64, 1024):
            grid = bind_grid(random_grid(30, 2, 2, 8, d))
            fm = build_feature_map(1, 1024, d, SOFT)
            res = favor_plus_s(grid, fm)
            out, _ = unbind_attention_only(res.S, res.B, grid.cell_keys)
            o = favor_plus(grid.cell(0, 0), fm).output * grid.cell_keys[0, 0]
            assert np.linalg.norm(out[0, 0] - o) / np.linalg.norm(o) > 0.5


class TestLayers:
    @pytest.mark.parametrize("mode", list(LayerMode))
    def test_degenerate_matches_performer(self, mode):
        p = init_layer_params(0, 16, 2, 32, features=32)
        x = srng.stream(1).standard_normal((6, 16))
        keys = LayerKeys(np.ones((1, 1, 2, 8)), np.ones((1, 1, 16)))
        got = mimoformer_layer(x[None, None], p, mode, seed=3, keys=keys)[0, 0]
        np.testing.assert_allclose(got, performer_layer(x, p, seed=3), atol=1e-12)

    def test_zero_mlp_identity_projection(self):
        p = init_layer_params(1, 8, 2, 16, features=16)
        p = type(p)(p.wq, p.wk, p.wv, np.eye(8), np.zeros_like(p.w1), p.b1, np.zeros_like(p.w2), p.b2, 2, 16)
        x = srng.stream(2).standard_normal((2, 2, 5, 8))
        out = mimoformer_layer(x, p, LayerMode.ATT_ONLY, seed=4)
        keys = layer_keys(4, 0, 2, 2, p)
        fms = layer_feature_maps(4, 0, p)
        att = []
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            grid = ChannelGrid((x @ p.wk)[..., sl], (x @ p.wq)[..., sl], (x @ p.wv)[..., sl], keys.favor[:, :, h])
            res = favor_plus_s(bind_grid(grid), fms[h])
            att.append(unbind_attention_only(res.S, res.B, grid.cell_keys)[0])
        np.testing.assert_allclose(out, x + np.concatenate(att, axis=-1), atol=1e-12)

    def test_deterministic(self):
        p = init_layer_params(2, 16, 4, 32, features=16)
        x = srng.stream(3).standard_normal((2, 2, 4, 16))
        for mode in LayerMode:
            a = mimoformer_layer(x, p, mode, seed=9, layer_index=1)
            np.testing.assert_array_equal(a, mimoformer_layer(x, p, mode, seed=9, layer_index=1))

    def test_shape_errors(self):
        p = init_layer_params(0, 16, 2, 32)
        with pytest.raises(ValueError):
            mimoformer_layer(np.zeros((1, 1, 3, 8)), p)
        with pytest.raises(ValueError):
            mimoformer_layer(np.zeros((1, 1, 3, 16)), p, keys=LayerKeys(np.ones((1, 1, 2, 4)), np.ones((1, 1, 16))))
        with pytest.raises(ValueError):
            init_layer_params(0, 10, 3, 8)

    def test_skip_crosstalk_shrinks(self):
        # with the attention projection and MLP zeroed, the superposed skip path
        # returns each input plus sign-scrambled copies of its column partners
        med = []
        for e in (64, 256, 1024):
            errs = []
            for s in range(6):
                p = init_layer_params(s, e, 4, 8, features=8)
                p = type(p)(p.wq, p.wk, p.wv, np.zeros((e, e)), np.zeros_like(p.w1), p.b1,
                            np.zeros_like(p.w2), p.b2, 4, 8)
                x = srng.stream(40 + s).standard_normal((2, 2, 3, e))
                y = mimoformer_layer(x, p, LayerMode.ATT_MLP, seed=s)
                errs.append(np.median(np.abs(np.sum((y - x) * x, -1)) / np.sum(x * x, -1)))
            med.append(np.median(errs))
        assert med[0] > med[1] > med[2]

    @pytest.mark.xfail(strict=True, reason="untrained projection cannot map FAVOR-bound streams onto the skip key set; deviation has a dimension-free floor (see decisions ledger)")
    def test_att_mlp_tracks_att_only_with_width(self):
        med = []
        for e in (64, 256, 512):
            devs = []
            for s in range(6):
                p = init_layer_params(s, e, 4, 2 * e, features=64)
                x = srng.stream(50 + s, e).standard_normal((2, 2, 8, e))
                a = mimoformer_layer(x, p, LayerMode.ATT_ONLY, seed=s)
                b = mimoformer_layer(x, p, LayerMode.ATT_MLP, seed=s)
                devs.append(np.median(np.linalg.norm(b - a, axis=-1) / np.linalg.norm(a, axis=-1)))
            med.append(np.median(devs))
        assert med[0] > med[1] > med[2]
