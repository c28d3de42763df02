import numpy as np
import pytest

from wavequery.daqs import (
    DaqsParams,
    daqs_backward,
    daqs_forward,
    map_from_tokens,
    project_out_style,
    project_out_style_vjp,
    select_topk,
    style_embedding,
    style_embedding_vjp,
    tokens_from_map,
)
from wavequery.numcore import (
    ChannelStats,
    ContractViolationError,
    LinearParams,
    RngStream,
    channel_stats,
    finite_diff_vjp_check,
)


def make_params(c=8, d=8, num_classes=3, k=3, proj_alpha=1.0, seed=0):
    rng = RngStream(seed)
    return DaqsParams(
        es_linear=LinearParams(weight=rng.normal(0, 0.5, (d, c)),
                               bias=rng.normal(0, 0.1, (d,))),
        es_norm_gamma=np.ones(d),
        es_norm_beta=np.zeros(d),
        ec_head=LinearParams(weight=rng.normal(0, 0.5, (num_classes, d)),
                             bias=rng.normal(0, 0.1, (num_classes,))),
        k=k,
        proj_alpha=proj_alpha,
    )


class TestStyleEmbedding:
    def test_constant_stats_give_zero_vector(self):
        p = make_params(c=4, d=4)
        p.es_linear.weight = np.eye(4)
        p.es_linear.bias = np.zeros(4)
        stats = ChannelStats(mu=np.full((2, 4), 1.5), sigma=np.full((2, 4), 0.5))
        emb = style_embedding(stats, p)
        np.testing.assert_allclose(emb.s, 0.0, atol=1e-8)

    def test_direct_evaluation(self):
        # identity linear on mu + sigma = [2, 4]; layer norm gives [-1, 1].
        p = make_params(c=2, d=2)
        p.es_linear.weight = np.eye(2)
        p.es_linear.bias = np.zeros(2)
        stats = ChannelStats(mu=np.array([[1.0, 3.0]]), sigma=np.array([[1.0, 1.0]]))
        emb = style_embedding(stats, p)
        np.testing.assert_allclose(emb.s, [[-1.0, 1.0]], atol=1e-4)
        np.testing.assert_allclose(emb.norm_sq, (emb.s ** 2).sum(axis=-1))

    def test_output_dim(self):
        p = make_params(c=6, d=10)
        stats = ChannelStats(mu=np.zeros((3, 6)), sigma=np.ones((3, 6)))
        assert style_embedding(stats, p).s.shape == (3, 10)

    def test_dim_mismatch(self):
        p = make_params(c=6, d=10)
        with pytest.raises(ContractViolationError):
            style_embedding(ChannelStats(mu=np.zeros((1, 4)), sigma=np.ones((1, 4))), p)

    def test_vjp_finite_diff(self):
        p = make_params(c=5, d=7, seed=1)
        u = RngStream(2).normal(size=(2, 7))

        def fwd(x):
            stats = ChannelStats(mu=x, sigma=np.zeros_like(x))
            return style_embedding(stats, p).s

        def bwd(x, uu):
            stats = ChannelStats(mu=x, sigma=np.zeros_like(x))
            return style_embedding_vjp(stats, p, uu)[0]

        x = RngStream(3).normal(0.5, 1.0, size=(2, 5))
        assert finite_diff_vjp_check(fwd, bwd, x, u) < 1e-6


class TestProjection:
    def test_full_removal_of_style_row(self):
        s = np.array([1.0, 2.0, 2.0])
        q = np.stack([s, 2.0 * s])
        out = project_out_style(q, s, 1.0)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_orthogonal_row_unchanged(self):
        s = np.array([1.0, 0.0])
        q = np.array([[0.0, 3.0]])
        for alpha in (0.0, 0.5, 1.0):
            np.testing.assert_allclose(project_out_style(q, s, alpha), q)

    def test_partial_removal(self):
        # proj of [3, 4] on [1, 0] is [3, 0]; removing half leaves [1.5, 4].
        out = project_out_style(np.array([[3.0, 4.0]]), np.array([1.0, 0.0]), 0.5)
        np.testing.assert_allclose(out, [[1.5, 4.0]])

    def test_idempotence_at_full_alpha(self):
        rng = RngStream(4)
        q = rng.normal(size=(2, 6, 5))
        s = rng.normal(size=(2, 5))
        once = project_out_style(q, s, 1.0)
        twice = project_out_style(once, s, 1.0)
        assert np.abs(twice - once).max() <= 1e-5

    def test_orthogonality_at_full_alpha(self):
        rng = RngStream(5)
        q = rng.normal(size=(3, 8, 6)).astype(np.float32)
        s = rng.normal(size=(3, 6)).astype(np.float32)
        q_hat = project_out_style(q, s, 1.0)
        inner = np.abs(np.einsum("ntd,nd->nt", q_hat, s))
        bound = 1e-5 * (np.linalg.norm(q, axis=-1) * np.linalg.norm(s, axis=-1)[:, None] + 1.0)
        assert np.all(inner <= bound)

    def test_norm_contraction(self):
        rng = RngStream(6)
        q = rng.normal(size=(2, 7, 4))
        s = rng.normal(size=(2, 4))
        for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = project_out_style(q, s, alpha)
            assert np.all(np.linalg.norm(out, axis=-1)
                          <= np.linalg.norm(q, axis=-1) + 1e-6)

    def test_affine_in_alpha(self):
        rng = RngStream(7)
        q = rng.normal(size=(1, 5, 4))
        s = rng.normal(size=(1, 4))
        q0 = project_out_style(q, s, 0.0)
        q1 = project_out_style(q, s, 1.0)
        for alpha in (0.25, 0.5, 0.75):
            expected = (1.0 - alpha) * q0 + alpha * q1
            np.testing.assert_allclose(project_out_style(q, s, alpha), expected,
                                       atol=1e-10)

    def test_zero_style_skipped(self):
        q = RngStream(8).normal(size=(4, 3))
        out = project_out_style(q, np.zeros(3), 1.0)
        np.testing.assert_array_equal(out, q)

    def test_vjp_wrt_tokens_and_style(self):
        rng = RngStream(9)
        q = rng.normal(size=(2, 5, 4))
        s = rng.normal(size=(2, 4))
        u = rng.normal(size=(2, 5, 4))
        err_q = finite_diff_vjp_check(
            lambda v: project_out_style(v, s, 0.7),
            lambda v, uu: project_out_style_vjp(v, s, 0.7, uu)[0],
            q, u)
        assert err_q < 1e-6
        err_s = finite_diff_vjp_check(
            lambda v: project_out_style(q, v, 0.7),
            lambda v, uu: project_out_style_vjp(q, v, 0.7, uu)[1],
            s, u)
        assert err_s < 1e-6


class TestSelectTopK:
    def test_direct_ordering(self):
        p = make_params(c=2, d=2, num_classes=1, k=2)
        # one class, identity-ish head: score = sigmoid(w . q); make tokens
        # whose scores order as [0.1, 0.9, 0.5] via their logits.
        p.ec_head.weight = np.array([[1.0, 0.0]])
        p.ec_head.bias = np.array([0.0])
        logits = np.log(np.array([0.1, 0.9, 0.5]) / (1 - np.array([0.1, 0.9, 0.5])))
        q = np.stack([logits, np.zeros(3)], axis=-1)[None]
        result = select_topk(q, p)
        assert set(result.indices[0].tolist()) == {1, 2}
        assert result.indices[0, 0] == 1  # highest score first
        assert np.all(np.diff(result.scores[0]) <= 0)

    def test_positive_scaling_invariance(self):
        p = make_params(c=4, d=4, num_classes=3, k=2, seed=10)
        q = RngStream(11).normal(size=(2, 6, 4))
        base = select_topk(q, p)
        p_scaled = make_params(c=4, d=4, num_classes=3, k=2, seed=10)
        p_scaled.ec_head.weight = 3.0 * p.ec_head.weight
        p_scaled.ec_head.bias = 3.0 * p.ec_head.bias
        scaled = select_topk(q, p_scaled)
        np.testing.assert_array_equal(scaled.indices, base.indices)

    def test_tie_breaks_to_lower_index(self):
        p = make_params(c=2, d=2, num_classes=1, k=1)
        p.ec_head.weight = np.array([[1.0, 0.0]])
        p.ec_head.bias = np.array([0.0])
        q = np.zeros((1, 9, 2))
        q[0, 3, 0] = 2.0
        q[0, 7, 0] = 2.0
        result = select_topk(q, p)
        assert result.indices[0, 0] == 3

    def test_too_few_tokens_rejected(self):
        p = make_params(k=5)
        with pytest.raises(ContractViolationError):
            select_topk(np.zeros((1, 3, 8)), p)


class TestDaqsForward:
    def make_features(self, n=1, c=8, h=4, w=4, seed=12):
        return RngStream(seed).normal(0.5, 1.0, size=(n, c, h, w))

    def test_shapes(self):
        p = make_params(c=8, d=8, k=3)
        f = self.make_features()
        result, _ = daqs_forward(f, p, "train")
        assert result.queries.shape == (1, 3, 8)
        assert result.indices.shape == (1, 3)
        assert result.scores.shape == (1, 3)

    def test_selected_rows_orthogonal_to_style_in_train_mode(self):
        p = make_params(c=8, d=8, k=4, seed=13)
        f = self.make_features(n=2, seed=14)
        result, trace = daqs_forward(f, p, "train")
        s = trace.style.s
        inner = np.abs(np.einsum("nkd,nd->nk", result.queries, s))
        bound = 1e-5 * (np.linalg.norm(result.queries, axis=-1)
                        * np.linalg.norm(s, axis=-1)[:, None] + 1.0)
        assert np.all(inner <= bound)

    def test_alpha_zero_matches_plain_selection(self):
        p = make_params(c=8, d=8, k=3, proj_alpha=0.0, seed=15)
        f = self.make_features(seed=16)
        result, _ = daqs_forward(f, p, "infer")
        plain = select_topk(tokens_from_map(f), p)
        np.testing.assert_array_equal(result.indices, plain.indices)
        np.testing.assert_allclose(result.queries, plain.queries)

    def test_token_roundtrip(self):
        f = self.make_features(n=2, c=5, h=3, w=4, seed=17)
        np.testing.assert_array_equal(map_from_tokens(tokens_from_map(f), 3, 4), f)

    def test_too_small_map_rejected(self):
        p = make_params(k=10)
        with pytest.raises(ContractViolationError):
            daqs_forward(np.zeros((1, 8, 2, 2)), p, "train")

    def test_selection_json_roundtrip(self):
        import json

        p = make_params(c=8, d=8, k=2)
        result, _ = daqs_forward(self.make_features(seed=18), p, "train")
        payload = json.loads(json.dumps(result.to_json_dict()))
        assert payload["indices"] == result.indices.tolist()


class TestDaqsBackward:
    def test_zero_upstream_gives_zero_grads(self):
        p = make_params(c=8, d=8, k=3, seed=19)
        f = RngStream(20).normal(0.5, 1.0, size=(1, 8, 4, 4))
        result, trace = daqs_forward(f, p, "train")
        d_feat, grads = daqs_backward(trace, np.zeros_like(result.queries),
                                      np.zeros_like(result.scores))
        assert np.abs(d_feat).max() == 0.0
        assert all(np.abs(g).max() == 0.0 for g in grads.values())

    def test_composite_finite_diff_fixed_indices(self):
        p = make_params(c=6, d=6, k=3, seed=21)
        f0 = RngStream(22).normal(0.5, 1.0, size=(1, 6, 4, 4))
        base, _ = daqs_forward(f0, p, "train")
        fixed = base.indices

        def fwd(x):
            result, _ = daqs_forward(x, p, "train", indices_override=fixed)
            return result.queries, result.scores

        def bwd(x, u):
            _, trace = daqs_forward(x, p, "train", indices_override=fixed)
            return daqs_backward(trace, u[0], u[1])[0]

        rng = RngStream(23)
        u = (rng.normal(size=base.queries.shape), rng.normal(size=base.scores.shape))
        assert finite_diff_vjp_check(fwd, bwd, f0, u) < 1e-6

    def test_alpha_zero_input_grad_is_plain_gather(self):
        p = make_params(c=6, d=6, k=2, proj_alpha=0.0, seed=24)
        f = RngStream(25).normal(0.5, 1.0, size=(1, 6, 4, 4))
        result, trace = daqs_forward(f, p, "infer")
        u_q = RngStream(26).normal(size=result.queries.shape)
        d_feat, _ = daqs_backward(trace, u_q, np.zeros_like(result.scores))
        # with alpha = 0 and no score upstream, the input grad is exactly the
        # scatter of the query cotangents back onto their token positions.
        expected_tokens = np.zeros_like(trace.q)
        expected_tokens[0, result.indices[0]] = u_q[0]
        np.testing.assert_allclose(d_feat, map_from_tokens(expected_tokens, 4, 4),
                                   atol=1e-12)

    def test_stale_trace_rejected(self):
        p = make_params(c=6, d=6, k=2, seed=27)
        f = RngStream(28).normal(size=(1, 6, 4, 4))
        result, trace = daqs_forward(f, p, "train")
        with pytest.raises(ContractViolationError):
            daqs_backward(trace, np.zeros((1, 5, 6)), np.zeros_like(result.scores))
