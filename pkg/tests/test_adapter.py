import math

import numpy as np
import pytest

from dsga.adapter import (
    DsgaConfig,
    adaptive_k,
    build_graph,
    dropout_mask,
    dsga_forward,
    dsga_vjp,
    dual_pool,
    gated_residual,
    hybrid_pool,
    init_dsga_params,
    init_rank_weights,
    init_theta_k,
    parameter_count,
    propagate,
    rank_weights,
    similarity_matrix,
)
from dsga.numerics import finite_diff_grad
from dsga.pipeline import max_hybrid_error


class TestSimilarityMatrix:
    def test_identical_rows(self):
        z = np.array([[[1.0, 2.0, 2.0, 0.0], [1.0, 2.0, 2.0, 0.0]]])
        s = similarity_matrix(z)
        # cosine 1 scaled by 1/sqrt(4), then tanh
        assert abs(s[0, 0, 1] - math.tanh(0.5)) < 1e-12

    def test_orthogonal_rows(self):
        z = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        assert abs(similarity_matrix(z)[0, 0, 1]) < 1e-12

    def test_antipodal_one_dim(self):
        z = np.array([[[2.0], [-3.0]]])
        assert abs(similarity_matrix(z)[0, 0, 1] - math.tanh(-1.0)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        z64 = rng.standard_normal((2, 10, 4))
        s64 = similarity_matrix(z64)
        assert np.abs(s64 - s64.transpose(0, 2, 1)).max() < 1e-12
        s32 = similarity_matrix(z64.astype(np.float32))
        assert np.abs(s32 - s32.transpose(0, 2, 1)).max() < 1e-6

    def test_range_and_diagonal(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((1, 6, 4))
        s = similarity_matrix(z)
        assert np.all(np.abs(s) < 1.0)
        assert np.allclose(np.diagonal(s, axis1=1, axis2=2), math.tanh(0.5), atol=1e-9)


class TestRankWeights:
    def test_polynomial_decay_logits(self):
        assert np.allclose(init_rank_weights(3, 2.0), [1.0, 0.75, 0.0], atol=1e-15)

    def test_softmax_of_decay_logits(self):
        w = rank_weights(init_rank_weights(3, 2.0))
        expected = [0.46583556726652602, 0.36279310456968256, 0.17137132816379142]
        assert np.allclose(w, expected, rtol=0, atol=1e-15)

    def test_degenerate_single_rank(self):
        assert np.array_equal(rank_weights(init_rank_weights(1, 2.0)), [1.0])

    def test_large_decay_exponent_limit(self):
        # p -> inf drives logits to [1, 1, 0]: first two weights approach e/(2e+1)
        w = rank_weights(init_rank_weights(3, 1e6))
        e = math.e
        assert np.allclose(w[:2], e / (2 * e + 1), atol=1e-12)
        assert abs(w[2] - 1 / (2 * e + 1)) < 1e-12

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
    @pytest.mark.parametrize("k_max", [2, 4, 8])
    def test_strictly_decreasing(self, p, k_max):
        w = rank_weights(init_rank_weights(k_max, p))
        assert np.all(np.diff(w) < 0)


class TestAdaptiveK:
    def test_closed_form_case(self):
        assert adaptive_k(math.log(4.0), 8) == 6

    def test_lower_clamp(self):
        assert adaptive_k(-50.0, 8) == 1

    def test_upper_clamp(self):
        assert adaptive_k(50.0, 8) == 8

    def test_initializer(self):
        assert init_theta_k(8) == math.log(4.0)
        assert adaptive_k(init_theta_k(2), 2) in (1, 2)


class TestBuildGraph:
    def test_hand_constructed_top1(self):
        s = np.array(
            [[[0.0, 0.9, 0.1], [0.9, 0.0, 0.2], [0.1, 0.2, 0.0]]]
        )
        g = build_graph(s, k=1, weights=np.array([1.0]))
        assert g.neighbors[0, 0, 0] == 1
        dense = g.to_dense()[0]
        assert abs(dense[0, 0] - 0.5) < 1e-12 and abs(dense[0, 1] - 0.5) < 1e-12

    def test_single_node_self_loop(self):
        g = build_graph(np.zeros((1, 1, 1)), k=3, weights=np.ones(3))
        assert g.k == 0
        assert np.array_equal(g.to_dense(), [[[1.0]]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = int(rng.integers(1, 20))
            k = int(rng.integers(1, 9))
            s = np.tanh(rng.standard_normal((2, n, n)))
            dense = build_graph(s, k, rank_weights(init_rank_weights(8, 2.0))).to_dense()
            assert np.abs(dense.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_self_never_a_neighbor(self):
        rng = np.random.default_rng(10)
        s = np.tanh(rng.standard_normal((1, 12, 12)))
        g = build_graph(s, 4, rank_weights(init_rank_weights(8, 2.0)))
        for i in range(12):
            assert i not in g.neighbors[0, i]

    def test_tie_break_lowest_index(self):
        s = np.zeros((1, 4, 4))  # all similarities tie
        g = build_graph(s, 2, np.array([0.6, 0.4]))
        assert list(g.neighbors[0, 0]) == [1, 2]
        assert list(g.neighbors[0, 3]) == [0, 1]

    def test_rank_order_strict(self):
        rng = np.random.default_rng(11)
        s = np.tanh(rng.standard_normal((1, 16, 16)))
        g = build_graph(s, 5, rank_weights(init_rank_weights(8, 2.0)))
        for i in range(16):
            vals = s[0, i, g.neighbors[0, i]]
            assert np.all(np.diff(vals) < 0)  # continuous values: no ties


class TestPropagate:
    def test_single_node_identity(self):
        g = build_graph(np.zeros((1, 1, 1)), k=1, weights=np.array([1.0]))
        z = np.array([[[3.0, -1.0]]])
        assert np.array_equal(propagate(g, z), z)

    def test_uniform_row_averages(self):
        n = 4
        s = np.zeros((1, n, n))
        g = build_graph(s, n - 1, np.full(n - 1, 1.0 / (n - 1)))
        # every row: self weight and each edge weight equal 1/(1 + 1) shares
        z = np.arange(n, dtype=float).reshape(1, n, 1)
        out = propagate(g, z)
        dense = g.to_dense()
        assert np.allclose(out, dense @ z, atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(12)
        z = rng.standard_normal((3, 9, 4))
        s = similarity_matrix(z)
        g = build_graph(s, 3, rank_weights(init_rank_weights(8, 2.0)))
        assert np.allclose(propagate(g, z), g.to_dense() @ z, atol=1e-12)

    def test_node_count_mismatch_rejected(self):
        g = build_graph(np.zeros((1, 3, 3)), 1, np.array([1.0]))
        with pytest.raises(ValueError, match="nodes"):
            propagate(g, np.zeros((1, 4, 2)))


class TestDualPool:
    def test_constant_field(self):
        zp = np.full((1, 4, 5, 2), 3.25)
        mx, av = dual_pool(zp)
        assert np.array_equal(mx, zp) and np.allclose(av, zp, atol=1e-12)

    def test_interior_spike(self):
        zp = np.zeros((1, 5, 5, 1))
        zp[0, 2, 2, 0] = 1.0
        mx, av = dual_pool(zp)
        block = np.zeros((5, 5))
        block[1:4, 1:4] = 1.0
        assert np.array_equal(mx[0, :, :, 0], block)
        assert np.allclose(av[0, :, :, 0], block / 9.0, atol=1e-12)

    def test_one_by_one_replicates(self):
        zp = np.array([[[[7.5]]]])
        mx, av = dual_pool(zp)
        assert mx[0, 0, 0, 0] == 7.5 and abs(av[0, 0, 0, 0] - 7.5) < 1e-12

    def test_output_shape_matches_input(self):
        rng = np.random.default_rng(13)
        zp = rng.standard_normal((2, 3, 7, 4))
        mx, av = dual_pool(zp)
        assert mx.shape == zp.shape == av.shape


class TestHybridPoolAndGate:
    def test_zero_raw_blends_equally(self):
        mx, av = np.array([2.0]), np.array([4.0])
        assert hybrid_pool(mx, av, 0.0) == pytest.approx(3.0)

    def test_saturates_to_max(self):
        mx, av = np.array([2.0]), np.array([4.0])
        assert hybrid_pool(mx, av, 50.0) == pytest.approx(2.0)

    def test_equal_inputs_invariant(self):
        x = np.array([1.0, -2.0])
        for w in (-3.0, 0.0, 5.0):
            assert np.allclose(hybrid_pool(x, x, w), x, atol=1e-15)

    def test_gate_closed(self):
        zp, pooled = np.array([1.0]), np.array([9.0])
        assert gated_residual(zp, pooled, -60.0) == pytest.approx(1.0)

    def test_gate_saturates_at_half(self):
        zp, pooled = np.array([1.0]), np.array([9.0])
        assert gated_residual(zp, pooled, 60.0) == pytest.approx(5.0)

    def test_identical_inputs_pass_through(self):
        x = np.array([0.5, -1.5])
        assert np.allclose(gated_residual(x, x, 1.3), x, atol=1e-15)

    def test_preservation_bound(self):
        rng = np.random.default_rng(14)
        zp = rng.standard_normal((2, 3, 3, 2))
        pooled = rng.standard_normal((2, 3, 3, 2))
        for w in (-4.0, -0.3, 0.0, 1.7, 30.0):
            out = gated_residual(zp, pooled, w)
            assert np.abs(out - zp).max() <= 0.5 * np.abs(pooled - zp).max() + 1e-12


# ---------------------------------------------------------------------------
# straight-line reimplementation of the full forward pass (loops only), used
# as the dual-implementation oracle


def _reflect(i, n):
    if n == 1:
        return 0
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def straightline_forward(x, params, cfg):
    b, h, w, d = x.shape
    n = h * w
    dh = cfg.d_hidden
    xf = x.reshape(b, n, d)

    z = np.zeros((b, n, dh))
    for bi in range(b):
        for i in range(n):
            for j in range(dh):
                acc = params.down_b[j]
                for t in range(d):
                    acc += xf[bi, i, t] * params.down_w[t, j]
                z[bi, i, j] = acc * 0.5 * (1.0 + math.erf(acc / math.sqrt(2.0)))

    zh = np.zeros_like(z)
    for bi in range(b):
        for i in range(n):
            norm = math.sqrt(sum(z[bi, i, j] ** 2 for j in range(dh)))
            for j in range(dh):
                zh[bi, i, j] = z[bi, i, j] / (norm + 1e-12)
    sim = np.zeros((b, n, n))
    for bi in range(b):
        for i in range(n):
            for j in range(n):
                dot = sum(zh[bi, i, t] * zh[bi, j, t] for t in range(dh))
                sim[bi, i, j] = math.tanh(dot / math.sqrt(dh))

    k = min(cfg.k_max, max(1, math.floor(
        1.0 / (1.0 + math.exp(-params.theta_k)) * (cfg.k_max - 1) + 1)))
    k = min(k, n - 1)

    logits = np.asarray(params.rank_logits, dtype=np.float64)
    exps = np.exp(logits - logits.max())
    wr = exps / exps.sum()

    g_out = np.zeros((b, n, dh))
    row_sum = 1.0 + sum(wr[:k])
    for bi in range(b):
        for i in range(n):
            order = sorted((j for j in range(n) if j != i),
                           key=lambda j: (-sim[bi, i, j], j))
            nbrs = order[:k]
            for t in range(dh):
                acc = z[bi, i, t] / row_sum
                for r, j in enumerate(nbrs):
                    acc += (wr[r] / row_sum) * z[bi, j, t]
                g_out[bi, i, t] = acc

    f = np.zeros((b, n, dh))
    for bi in range(b):
        for i in range(n):
            for j in range(dh):
                f[bi, i, j] = sum(g_out[bi, i, t] * params.fusion_w[t, j] for t in range(dh))
    fr = f.reshape(b, h, w, dh)

    sp = 1.0 / (1.0 + math.exp(-params.w_p_raw))
    gate = 0.5 / (1.0 + math.exp(-params.w_n_raw))
    zp = np.zeros_like(fr)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                for c in range(dh):
                    vals = [
                        fr[bi, _reflect(y + dy, h), _reflect(xx + dx, w), c]
                        for dy in (-1, 0, 1)
                        for dx in (-1, 0, 1)
                    ]
                    pooled = sp * max(vals) + (1.0 - sp) * (sum(vals) / 9.0)
                    zp[bi, y, xx, c] = (1.0 - gate) * fr[bi, y, xx, c] + gate * pooled

    out = np.array(x, dtype=np.float64)
    flat = zp.reshape(b, n, dh)
    for bi in range(b):
        for i in range(n):
            for j in range(d):
                acc = params.up_b[j]
                for t in range(dh):
                    acc += flat[bi, i, t] * params.up_w[t, j]
                out[bi, i // w, i % w, j] += acc
    return out


class TestDsgaForward:
    def test_zero_up_projection_is_identity(self):
        cfg = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.1, mode="eval", seed=2)
        params = init_dsga_params(cfg)
        params.up_w = np.zeros_like(params.up_w)
        params.up_b = np.zeros_like(params.up_b)
        rng = np.random.default_rng(20)
        x = rng.standard_normal((2, 3, 2, 8)).astype(np.float32)
        out, _ = dsga_forward(x, params, cfg)
        assert out.dtype == x.dtype
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("embed_dim", [4, 8])
    def test_matches_straightline_reimplementation(self, embed_dim):
        cfg = DsgaConfig(
            embed_dim=embed_dim, k_max=3, dropout_prob=0.0, mode="eval", seed=33
        )
        params = init_dsga_params(cfg, precision="double")
        rng = np.random.default_rng(34)
        x = rng.standard_normal((1, 2, 2, embed_dim))
        out, _ = dsga_forward(x, params, cfg)
        ref = straightline_forward(x, params, cfg)
        assert np.allclose(out, ref, rtol=0, atol=1e-9)

    def test_train_mode_without_dropout_matches_eval(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((1, 2, 3, 8))
        cfg_eval = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.0, mode="eval", seed=3)
        cfg_train = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.0, mode="train", seed=3)
        params = init_dsga_params(cfg_eval)
        out_e, _ = dsga_forward(x, params, cfg_eval)
        out_t, _ = dsga_forward(x, params, cfg_train)
        assert np.array_equal(out_e, out_t)

    def test_train_dropout_changes_output_deterministically(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((1, 2, 3, 8))
        cfg = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.5, mode="train", seed=4)
        params = init_dsga_params(cfg)
        out1, _ = dsga_forward(x, params, cfg)
        out2, _ = dsga_forward(x, params, cfg)
        assert np.array_equal(out1, out2)
        out_eval, _ = dsga_forward(
            x, params, DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.5, mode="eval", seed=4)
        )
        assert not np.array_equal(out1, out_eval)

    def test_permutation_equivariance_of_graph_stage(self):
        rng = np.random.default_rng(23)
        z = rng.standard_normal((1, 9, 3))
        w = rank_weights(init_rank_weights(4, 2.0))
        fusion = rng.standard_normal((3, 3))

        def graph_stage(feats):
            g = build_graph(similarity_matrix(feats), 3, w)
            return propagate(g, feats) @ fusion

        perm = rng.permutation(9)
        base = graph_stage(z)
        permuted = graph_stage(z[:, perm])
        assert np.allclose(permuted, base[:, perm], atol=1e-10)

    def test_shape_validation(self):
        cfg = DsgaConfig(embed_dim=8)
        params = init_dsga_params(cfg)
        with pytest.raises(ValueError, match="embed_dim"):
            dsga_forward(np.zeros((1, 2, 2, 4)), params, cfg)

    def test_raw_similarity_retained_only_on_request(self):
        cfg = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.0, mode="eval", seed=6)
        params = init_dsga_params(cfg)
        rng = np.random.default_rng(30)
        x = rng.standard_normal((1, 2, 2, 8))
        _, lean = dsga_forward(x, params, cfg)
        assert lean.raw_similarity is None
        _, debug = dsga_forward(x, params, cfg, keep_similarity=True)
        assert debug.raw_similarity is not None
        assert debug.raw_similarity.shape == (1, 4, 4)


class TestDropoutMask:
    def test_zero_prob_identity(self):
        assert np.array_equal(dropout_mask(16, 0.0, seed=1), np.ones(16))

    def test_deterministic_and_stream_keyed(self):
        m1 = dropout_mask(64, 0.3, seed=5, stream=0)
        m2 = dropout_mask(64, 0.3, seed=5, stream=0)
        assert np.array_equal(m1, m2)
        assert not np.array_equal(m1, dropout_mask(64, 0.3, seed=6, stream=0))
        assert not np.array_equal(m1, dropout_mask(64, 0.3, seed=5, stream=1))

    def test_inverted_scaling(self):
        m = dropout_mask(4096, 0.25, seed=7)
        kept = m[m > 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert 0.6 < kept.size / 4096 < 0.9


class TestDsgaVjp:
    def _setup(self, seed=40, embed_dim=8):
        cfg = DsgaConfig(
            embed_dim=embed_dim, reduction_ratio=0.25, k_max=3,
            dropout_prob=0.0, mode="eval", seed=seed,
        )
        params = init_dsga_params(cfg, precision="double")
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 3, embed_dim))
        return cfg, params, x, rng

    def test_zero_upstream_gives_zero_cotangents(self):
        cfg, params, x, _ = self._setup()
        dx, grads = dsga_vjp(x, params, cfg, np.zeros_like(x))
        assert np.array_equal(dx, np.zeros_like(x))
        for arr in grads.named_arrays().values():
            assert np.array_equal(arr, np.zeros_like(arr))
        assert grads.w_p_raw == 0.0 and grads.w_n_raw == 0.0 and grads.theta_k == 0.0

    def test_residual_term_with_zero_up(self):
        cfg, params, x, rng = self._setup(seed=41)
        params.up_w = np.zeros_like(params.up_w)
        upstream = rng.standard_normal(x.shape)
        dx, _ = dsga_vjp(x, params, cfg, upstream)
        assert np.allclose(dx, upstream, atol=1e-15)

    def test_matches_finite_differences(self):
        cfg, params, x, rng = self._setup(seed=42)
        upstream = rng.standard_normal(x.shape)
        dx, grads = dsga_vjp(x, params, cfg, upstream)

        fd_x = finite_diff_grad(
            lambda t: float(np.sum(upstream * dsga_forward(t, params, cfg)[0])), x
        )
        assert max_hybrid_error(dx, fd_x) <= 1e-4

        from dsga.pipeline import _replace_param

        for name in ("down_w", "fusion_w", "rank_logits", "up_b", "w_p_raw", "w_n_raw"):
            theta0 = np.asarray(getattr(params, name), dtype=np.float64)

            def f(theta, name=name):
                value = float(theta.reshape(())) if theta0.ndim == 0 else theta
                out, _ = dsga_forward(x, _replace_param(params, name, value), cfg)
                return float(np.sum(upstream * out))

            fd = finite_diff_grad(f, theta0)
            assert max_hybrid_error(np.asarray(getattr(grads, name)), fd) <= 1e-4, name

    def test_requires_no_dropout(self):
        cfg = DsgaConfig(embed_dim=8, dropout_prob=0.2, mode="train", seed=1)
        params = init_dsga_params(cfg)
        with pytest.raises(ValueError, match="dropout"):
            dsga_vjp(np.zeros((1, 2, 2, 8)), params, cfg, np.zeros((1, 2, 2, 8)))

    @pytest.mark.parametrize("shape", [(1, 1, 1), (1, 1, 3), (2, 3, 1)])
    def test_degenerate_spatial_shapes_match_fd(self, shape):
        # single-node graphs and 1-wide strips exercise the replicating
        # reflect padding in both directions of the pooling backward
        from dsga.pipeline import _replace_param

        b, h, w = shape
        cfg = DsgaConfig(embed_dim=8, k_max=3, dropout_prob=0.0, mode="eval", seed=50)
        params = init_dsga_params(cfg, precision="double")
        rng = np.random.default_rng(51)
        x = rng.standard_normal((b, h, w, 8))
        upstream = rng.standard_normal(x.shape)
        dx, grads = dsga_vjp(x, params, cfg, upstream)
        fd_x = finite_diff_grad(
            lambda t: float(np.sum(upstream * dsga_forward(t, params, cfg)[0])), x
        )
        assert max_hybrid_error(dx, fd_x) <= 1e-4

        def fusion_scalar(t):
            out, _ = dsga_forward(x, _replace_param(params, "fusion_w", t), cfg)
            return float(np.sum(upstream * out))

        fd_fusion = finite_diff_grad(fusion_scalar, params.fusion_w)
        assert max_hybrid_error(grads.fusion_w, fd_fusion) <= 1e-4


class TestParameterCount:
    def test_vit_base_profile(self):
        cfg = DsgaConfig(embed_dim=768, reduction_ratio=0.25, k_max=8)
        assert parameter_count(cfg, 12) == 3_992_964

    def test_tiny_config(self):
        cfg = DsgaConfig(embed_dim=4, reduction_ratio=0.25, k_max=1)
        assert parameter_count(cfg, 1) == 18

    def test_zero_layers(self):
        assert parameter_count(DsgaConfig(embed_dim=768), 0) == 0

    def test_matches_actual_parameter_arrays(self):
        cfg = DsgaConfig(embed_dim=16, reduction_ratio=0.25, k_max=5)
        params = init_dsga_params(cfg)
        assert params.count() == parameter_count(cfg, 1)
