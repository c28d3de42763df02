"""Style-orthogonal query selection.

Flattened encoder tokens carry style-induced bias in the direction of a
learned per-image style embedding. This module builds that embedding from
the encoder map's channel statistics (linear layer + layer norm on
``mu + sigma``), removes its span from every token by orthogonal
projection,

    q_hat_i = q_i - proj_alpha * (<q_i, s> / ||s||^2) * s,

and picks the top-K tokens by the max sigmoid confidence of an auxiliary
class head. The projection factor is pinned to 1 during training and
configurable at inference. Projection is applied only for selection: the
selected rows (post-projection) seed the decoder, while any other consumer
of the encoder tokens sees them unprojected.

The top-K index choice is non-differentiable and treated as a constant
gather in the backward pass; everything else — scores, projection, style
embedding, channel statistics — is differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    ChannelStats,
    ContractViolationError,
    LinearParams,
    channel_stats,
    layer_normalize,
    layer_normalize_vjp,
    linear_apply,
    linear_vjp,
)

# Style vectors with squared norm below this are treated as absent: the
# projection (and its backward) becomes the identity.
ZERO_STYLE_TOL = 1e-12


@dataclass
class DaqsParams:
    """Learnable pieces of the selection path."""

    es_linear: LinearParams   # style encoder linear, c -> d
    es_norm_gamma: np.ndarray  # (d,) layer-norm scale
    es_norm_beta: np.ndarray   # (d,) layer-norm shift
    ec_head: LinearParams     # auxiliary class head, d -> num_classes
    k: int                    # selection count
    proj_alpha: float = 1.0   # inference-time removal factor in [0, 1]

    def __post_init__(self):
        if not 0.0 <= self.proj_alpha <= 1.0:
            raise ContractViolationError("proj_alpha must be in [0, 1]")
        if self.k < 1:
            raise ContractViolationError("k must be >= 1")


@dataclass(frozen=True)
class StyleEmbedding:
    """Per-image style vector spanning the subspace removed from tokens."""

    s: np.ndarray            # (n, d)
    source_stats: ChannelStats
    norm_sq: np.ndarray      # (n,) cached ||s||^2


@dataclass
class SelectionResult:
    """Top-K outcome: indices sorted by (score desc, index asc)."""

    indices: np.ndarray  # (n, k) token indices
    queries: np.ndarray  # (n, k, d) selected post-projection rows
    scores: np.ndarray   # (n, k) confidences in [0, 1], non-increasing

    def to_json_dict(self) -> dict:
        return {
            "indices": self.indices.tolist(),
            "scores": self.scores.tolist(),
            "queries": self.queries.tolist(),
        }


def style_embedding(stats: ChannelStats, p: DaqsParams) -> StyleEmbedding:
    """Encode per-image channel statistics into a style vector:
    layer-norm(linear(mu + sigma)). Rows are per-image and independent."""
    x = stats.mu + stats.sigma
    if x.shape[-1] != p.es_linear.d_in:
        raise ContractViolationError(
            f"stats channel count {x.shape[-1]} != style encoder d_in {p.es_linear.d_in}")
    z = linear_apply(x, p.es_linear)
    s = layer_normalize(z, p.es_norm_gamma, p.es_norm_beta)
    return StyleEmbedding(s=s, source_stats=stats, norm_sq=(s * s).sum(axis=-1))


def style_embedding_vjp(stats: ChannelStats, p: DaqsParams, upstream: np.ndarray):
    """VJP of :func:`style_embedding` w.r.t. ``mu + sigma`` and the encoder
    params. Returns ``(dx, dweight, dbias, dgamma, dbeta)``."""
    x = stats.mu + stats.sigma
    z = linear_apply(x, p.es_linear)
    dz, dgamma, dbeta = layer_normalize_vjp(z, p.es_norm_gamma, upstream)
    dx, dweight, dbias = linear_vjp(x, p.es_linear, dz)
    return dx, dweight, dbias, dgamma, dbeta


def _as_batched(q: np.ndarray, s: np.ndarray):
    if q.ndim == 2 and s.ndim == 1:
        return q[None], s[None], True
    if q.ndim == 3 and s.ndim == 2:
        return q, s, False
    raise ContractViolationError(
        f"expected token matrix (t, d) or batch (n, t, d); got q {q.shape}, s {s.shape}")


def project_out_style(q: np.ndarray, s, proj_alpha: float) -> np.ndarray:
    """Remove ``proj_alpha`` of each token's component along the style axis.

    ``s`` may be a :class:`StyleEmbedding` or a raw vector/batch of vectors.
    Images whose style vector has (near-)zero norm are returned unchanged.
    """
    s_vec = s.s if isinstance(s, StyleEmbedding) else np.asarray(s)
    qb, sb, squeeze = _as_batched(np.asarray(q), s_vec)
    if qb.shape[-1] != sb.shape[-1]:
        raise ContractViolationError(
            f"token dim {qb.shape[-1]} != style dim {sb.shape[-1]}")
    norm_sq = (sb * sb).sum(axis=-1)
    live = norm_sq >= ZERO_STYLE_TOL
    denom = np.where(live, norm_sq, 1.0)
    coef = np.einsum("ntd,nd->nt", qb, sb) / denom[:, None]
    out = qb - proj_alpha * live[:, None, None] * coef[:, :, None] * sb[:, None, :]
    return out[0] if squeeze else out


def project_out_style_vjp(q: np.ndarray, s, proj_alpha: float, upstream: np.ndarray):
    """VJP of :func:`project_out_style` w.r.t. tokens and style vector.
    Returns ``(dq, ds)`` with ``ds`` batched per image."""
    s_vec = s.s if isinstance(s, StyleEmbedding) else np.asarray(s)
    qb, sb, squeeze = _as_batched(np.asarray(q), s_vec)
    ub = upstream[None] if squeeze else upstream
    norm_sq = (sb * sb).sum(axis=-1)
    live = norm_sq >= ZERO_STYLE_TOL
    denom = np.where(live, norm_sq, 1.0)

    us = np.einsum("ntd,nd->nt", ub, sb) / denom[:, None]   # <u_i, s> / ||s||^2
    qs = np.einsum("ntd,nd->nt", qb, sb) / denom[:, None]   # <q_i, s> / ||s||^2
    gate = live[:, None, None].astype(qb.dtype)

    dq = ub - proj_alpha * gate * us[:, :, None] * sb[:, None, :]
    ds = -proj_alpha * (
        np.einsum("nt,ntd->nd", us, qb)
        + np.einsum("nt,ntd->nd", qs, ub)
        - 2.0 * (qs * us * denom[:, None]).sum(axis=1)[:, None] * sb / denom[:, None]
    )
    ds = np.where(live[:, None], ds, 0.0)
    if squeeze:
        return dq[0], ds[0]
    return dq, ds


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _token_confidence(q_hat: np.ndarray, p: DaqsParams):
    """Per-token confidence: max over classes of sigmoid(aux head logits).
    Returns (score (n, t), class probs (n, t, C))."""
    logits = linear_apply(q_hat, p.ec_head)
    probs = _sigmoid(logits)
    return probs.max(axis=-1), probs


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on -score: exact ties resolve to the lower token index.
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, :k]


def select_topk(q_hat: np.ndarray, p: DaqsParams) -> SelectionResult:
    """Pick the K highest-confidence tokens (ties broken by lower index)."""
    if q_hat.ndim != 3:
        raise ContractViolationError(f"expected (n, t, d) tokens, got {q_hat.shape}")
    n, t, _ = q_hat.shape
    if t < p.k:
        raise ContractViolationError(f"cannot select k={p.k} from {t} tokens")
    scores, _ = _token_confidence(q_hat, p)
    indices = _topk_indices(scores, p.k)
    rows = np.arange(n)[:, None]
    return SelectionResult(indices=indices, queries=q_hat[rows, indices],
                           scores=scores[rows, indices])


def tokens_from_map(f: np.ndarray) -> np.ndarray:
    """Flatten (n, c, h, w) into (n, h*w, c) row-major spatial tokens."""
    n, c, h, w = f.shape
    return np.ascontiguousarray(f.transpose(0, 2, 3, 1).reshape(n, h * w, c))


def map_from_tokens(q: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`tokens_from_map`."""
    n, t, c = q.shape
    return np.ascontiguousarray(q.reshape(n, h, w, c).transpose(0, 3, 1, 2))


@dataclass
class DaqsTrace:
    """Per-call record for the backward pass."""

    features: np.ndarray        # (n, c, h, w) encoder map
    stats: ChannelStats
    style: StyleEmbedding
    q: np.ndarray               # (n, t, d) unprojected tokens
    q_hat: np.ndarray           # (n, t, d) projected tokens
    proj_alpha: float
    indices: np.ndarray         # (n, k)
    sel_queries: np.ndarray     # (n, k, d) post-projection selected rows
    probs: np.ndarray           # (n, t, C) sigmoid class probs on all tokens
    scores: np.ndarray          # (n, t) per-token confidences
    params: DaqsParams


def daqs_forward(encoder_features: np.ndarray, p: DaqsParams, mode: str,
                 indices_override: np.ndarray | None = None):
    """Full selection path over an encoder feature map.

    Flattens the map to tokens, projects out the style span (factor 1 in
    ``train`` mode, the configured ``proj_alpha`` in ``infer`` mode) and
    selects the top-K rows. ``indices_override`` bypasses the top-K choice
    so finite-difference checks can hold the gather fixed.

    Returns ``(SelectionResult, DaqsTrace)``.
    """
    if mode not in ("train", "infer"):
        raise ContractViolationError(f"mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = encoder_features.shape
    if h * w < p.k:
        raise ContractViolationError(f"cannot select k={p.k} from {h * w} tokens")

    stats = channel_stats(encoder_features)
    style = style_embedding(stats, p)
    q = tokens_from_map(encoder_features)
    alpha = 1.0 if mode == "train" else p.proj_alpha
    q_hat = project_out_style(q, style, alpha)

    scores, probs = _token_confidence(q_hat, p)
    if indices_override is None:
        indices = _topk_indices(scores, p.k)
    else:
        indices = np.asarray(indices_override)
        if indices.shape != (n, p.k):
            raise ContractViolationError(
                f"indices_override shape {indices.shape} != {(n, p.k)}")
    rows = np.arange(n)[:, None]
    result = SelectionResult(indices=indices, queries=q_hat[rows, indices],
                             scores=scores[rows, indices])
    trace = DaqsTrace(features=encoder_features, stats=stats, style=style, q=q,
                      q_hat=q_hat, proj_alpha=alpha, indices=indices,
                      sel_queries=result.queries, probs=probs, scores=scores,
                      params=p)
    return result, trace


def daqs_backward(trace: DaqsTrace, d_queries: np.ndarray, d_scores: np.ndarray,
                  d_all_scores: np.ndarray | None = None):
    """VJP of :func:`daqs_forward` for cotangents on the selected queries and
    scores. The index choice carries no gradient (straight gather).
    ``d_all_scores`` optionally adds an upstream on every token's confidence
    (used when the confidences receive dense supervision).

    Returns ``(d_features, param_grads)`` where ``param_grads`` maps
    ``es_linear.weight``, ``es_linear.bias``, ``es_norm.gamma``,
    ``es_norm.beta``, ``ec_head.weight``, ``ec_head.bias`` to arrays.
    """
    p = trace.params
    n, t, d = trace.q.shape
    if d_queries.shape != trace.sel_queries.shape or d_scores.shape != trace.indices.shape:
        raise ContractViolationError(
            "stale trace: upstream shapes do not match the forward call")

    # Score path: score = max_C sigmoid(logits); route through the argmax
    # class. Selected-row cotangents are scattered onto the all-token grid.
    rows = np.arange(n)[:, None]
    d_score_grid = np.zeros_like(trace.scores)
    d_score_grid[rows, trace.indices] += d_scores
    if d_all_scores is not None:
        d_score_grid += d_all_scores
    probs = trace.probs
    arg = probs.argmax(axis=-1)
    token_cols = np.arange(t)[None, :]
    d_logits = np.zeros_like(probs)
    pmax = probs[rows, token_cols, arg]
    d_logits[rows, token_cols, arg] = d_score_grid * pmax * (1.0 - pmax)
    dq_hat_scores, dw_ec, db_ec = linear_vjp(trace.q_hat, p.ec_head, d_logits)

    # Gather adjoint for the selected queries, plus the score path above.
    dq_hat = dq_hat_scores
    dq_hat[rows, trace.indices] += d_queries

    # Projection adjoint: to tokens and to the style vector.
    dq, ds = project_out_style_vjp(trace.q, trace.style, trace.proj_alpha, dq_hat)

    # Style-encoder adjoint down to d(mu + sigma).
    dx, dw_es, db_es, dgamma, dbeta = style_embedding_vjp(trace.stats, p, ds)

    # Statistics adjoint: mu and sigma share the upstream dx.
    f = trace.features
    count = f.shape[2] * f.shape[3]
    mu = trace.stats.mu[:, :, None, None]
    sigma = trace.stats.sigma[:, :, None, None]
    centered = f - mu
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    dsig = np.where(sigma > 0, centered / (count * safe_sigma), 0.0)
    d_features = (dx[:, :, None, None] / count) + dx[:, :, None, None] * dsig

    # Token adjoint back onto the map layout.
    d_features = d_features + map_from_tokens(dq, f.shape[2], f.shape[3])

    grads = {
        "es_linear.weight": dw_es,
        "es_linear.bias": db_es,
        "es_norm.gamma": dgamma,
        "es_norm.beta": dbeta,
        "ec_head.weight": dw_ec,
        "ec_head.bias": db_ec,
    }
    return d_features, grads
