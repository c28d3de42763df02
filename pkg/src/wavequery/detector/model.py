"""Desk-scale detection transformer.

Pipeline: three stride-2 conv stages (with low-frequency style perturbation
hooks after stages 1 and 2 during training), a single self-attention
encoder block over the 8x8 token grid, style-orthogonal top-K query
selection, two cross-attention decoder blocks over the *unprojected*
encoder tokens, and class/box heads. Forward passes record a trace;
``model_backward`` walks it in reverse with hand-written VJPs and returns
gradients for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..daqs import (
    DaqsParams,
    daqs_backward,
    daqs_forward,
    map_from_tokens,
    tokens_from_map,
)
from ..numcore import (
    ContractViolationError,
    LinearParams,
    RngStream,
    layer_normalize,
    layer_normalize_vjp,
)
from ..styleaug import WaveNPConfig, wavenp_backward, wavenp_forward
from .layers import (
    attention,
    attention_vjp,
    conv2d,
    conv2d_vjp,
    relu,
    relu_vjp,
    sigmoid,
    softmax,
)

_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (8, 16, 32)
    heads: int = 4
    ffn_hidden: int = 64
    num_classes: int = 3
    k: int = 10
    decoder_blocks: int = 2
    grid_tokens: int = 64  # encoder token count (8x8 grid for 64x64 inputs)
    anchor_size: float = 0.30  # prior box side used by the anchor logits
    wavenp: WaveNPConfig = field(default_factory=WaveNPConfig)
    style_projection: bool = True
    proj_alpha_infer: float = 1.0

    @property
    def d_model(self) -> int:
        return self.stage_channels[-1]


@dataclass
class ModelOutputs:
    class_logits: np.ndarray  # (n, k, num_classes + 1)
    class_probs: np.ndarray   # softmax over the last axis
    box_logits: np.ndarray    # (n, k, 4)
    boxes: np.ndarray         # sigmoid, (cx, cy, w, h) in [0, 1]
    sel_scores: np.ndarray    # (n, k) selection confidences
    sel_indices: np.ndarray   # (n, k) selected token indices
    all_scores: np.ndarray    # (n, t) confidence of every encoder token


def init_params(cfg: ModelConfig, rng: RngStream, dtype=np.float64) -> dict[str, np.ndarray]:
    """He/Xavier-style initialization of every parameter block, drawn in a
    fixed order from the stream."""
    params: dict[str, np.ndarray] = {}
    d = cfg.d_model

    def norm(shape, std):
        return rng.normal(0.0, std, size=shape, dtype=dtype)

    cin = cfg.in_channels
    for i, cout in enumerate(cfg.stage_channels, start=1):
        params[f"conv{i}.weight"] = norm((cout, cin, 3, 3), np.sqrt(2.0 / (cin * 9)))
        params[f"conv{i}.bias"] = np.zeros(cout, dtype=dtype)
        cin = cout

    def attn_block(prefix):
        for key in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{key}"] = norm((d, d), np.sqrt(1.0 / d))
        for key in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{key}"] = np.zeros(d, dtype=dtype)
        params[f"{prefix}.ln1.gamma"] = np.ones(d, dtype=dtype)
        params[f"{prefix}.ln1.beta"] = np.zeros(d, dtype=dtype)
        params[f"{prefix}.ffn.w1"] = norm((cfg.ffn_hidden, d), np.sqrt(2.0 / d))
        params[f"{prefix}.ffn.b1"] = np.zeros(cfg.ffn_hidden, dtype=dtype)
        params[f"{prefix}.ffn.w2"] = norm((d, cfg.ffn_hidden), np.sqrt(1.0 / cfg.ffn_hidden))
        params[f"{prefix}.ffn.b2"] = np.zeros(d, dtype=dtype)
        params[f"{prefix}.ln2.gamma"] = np.ones(d, dtype=dtype)
        params[f"{prefix}.ln2.beta"] = np.zeros(d, dtype=dtype)

    # Learned positional embedding for the 8x8 token grid; without it the
    # attention stack is permutation-equivariant and box coordinates are
    # unrecoverable from token content.
    params["pos.embed"] = norm((cfg.grid_tokens, d), 0.1)
    attn_block("enc")
    params["daqs.es_linear.weight"] = norm((d, d), np.sqrt(1.0 / d))
    params["daqs.es_linear.bias"] = np.zeros(d, dtype=dtype)
    params["daqs.es_norm.gamma"] = np.ones(d, dtype=dtype)
    params["daqs.es_norm.beta"] = np.zeros(d, dtype=dtype)
    params["daqs.ec_head.weight"] = norm((cfg.num_classes, d), np.sqrt(1.0 / d))
    params["daqs.ec_head.bias"] = np.zeros(cfg.num_classes, dtype=dtype)
    for i in range(cfg.decoder_blocks):
        attn_block(f"dec{i}")
    params["head.cls.weight"] = norm((cfg.num_classes + 1, d), np.sqrt(1.0 / d))
    params["head.cls.bias"] = np.zeros(cfg.num_classes + 1, dtype=dtype)
    params["head.box.weight"] = norm((4, d), np.sqrt(1.0 / d))
    params["head.box.bias"] = np.zeros(4, dtype=dtype)
    return params


def daqs_params_view(params: dict[str, np.ndarray], cfg: ModelConfig) -> DaqsParams:
    """Selection-path parameters as a view over the flat dict (shared arrays)."""
    return DaqsParams(
        es_linear=LinearParams(params["daqs.es_linear.weight"],
                               params["daqs.es_linear.bias"]),
        es_norm_gamma=params["daqs.es_norm.gamma"],
        es_norm_beta=params["daqs.es_norm.beta"],
        ec_head=LinearParams(params["daqs.ec_head.weight"],
                             params["daqs.ec_head.bias"]),
        k=cfg.k,
        proj_alpha=cfg.proj_alpha_infer if cfg.style_projection else 0.0,
    )


def _attn_params(params, prefix):
    return {key: params[f"{prefix}.attn.{key}"] for key in _ATTN_KEYS}


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _anchor_logits(indices: np.ndarray, gh: int, gw: int, anchor_size: float,
                   dtype) -> np.ndarray:
    """Logit-space box priors per selected token: center at the token's grid
    cell, width/height at ``anchor_size``."""
    iy, ix = np.divmod(indices, gw)
    anchors = np.empty(indices.shape + (4,), dtype=dtype)
    cx = (ix + 0.5) / gw
    cy = (iy + 0.5) / gh
    anchors[..., 0] = np.log(cx / (1.0 - cx))
    anchors[..., 1] = np.log(cy / (1.0 - cy))
    anchors[..., 2] = _logit(anchor_size)
    anchors[..., 3] = _logit(anchor_size)
    return anchors


def _block_forward(xq, xkv, params, prefix, heads):
    """Attention block (post-norm): attn + residual + LN, FFN + residual + LN.
    Self-attention when ``xq is xkv``."""
    attn_out, attn_cache = attention(xq, xkv, _attn_params(params, prefix), heads)
    r1 = xq + attn_out
    y1 = layer_normalize(r1, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    hpre = y1 @ params[f"{prefix}.ffn.w1"].T + params[f"{prefix}.ffn.b1"]
    h = relu(hpre)
    r2 = y1 + h @ params[f"{prefix}.ffn.w2"].T + params[f"{prefix}.ffn.b2"]
    y2 = layer_normalize(r2, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    cache = {"attn": attn_cache, "r1": r1, "y1": y1, "hpre": hpre, "h": h, "r2": r2}
    return y2, cache


def _block_vjp(cache, params, prefix, heads, upstream, grads):
    """Reverse of ``_block_forward``; returns (dxq, dxkv)."""
    d = upstream.shape[-1]
    dr2, dg2, db2 = layer_normalize_vjp(cache["r2"], params[f"{prefix}.ln2.gamma"], upstream)
    grads[f"{prefix}.ln2.gamma"] += dg2
    grads[f"{prefix}.ln2.beta"] += db2

    w2 = params[f"{prefix}.ffn.w2"]
    dh = dr2 @ w2
    grads[f"{prefix}.ffn.w2"] += dr2.reshape(-1, d).T @ cache["h"].reshape(-1, w2.shape[1])
    grads[f"{prefix}.ffn.b2"] += dr2.reshape(-1, d).sum(axis=0)
    dhpre = relu_vjp(cache["hpre"], dh)
    w1 = params[f"{prefix}.ffn.w1"]
    dy1 = dhpre @ w1 + dr2  # FFN input + residual
    grads[f"{prefix}.ffn.w1"] += dhpre.reshape(-1, w1.shape[0]).T @ cache["y1"].reshape(-1, d)
    grads[f"{prefix}.ffn.b1"] += dhpre.reshape(-1, w1.shape[0]).sum(axis=0)

    dr1, dg1, db1 = layer_normalize_vjp(cache["r1"], params[f"{prefix}.ln1.gamma"], dy1)
    grads[f"{prefix}.ln1.gamma"] += dg1
    grads[f"{prefix}.ln1.beta"] += db1

    dxq_attn, dxkv, attn_grads = attention_vjp(cache["attn"], _attn_params(params, prefix),
                                               heads, dr1)
    for key, g in attn_grads.items():
        grads[f"{prefix}.attn.{key}"] += g
    if cache["attn"].self_attention:
        # dxq_attn already contains both query and key/value paths.
        return dxq_attn + dr1, None
    return dxq_attn + dr1, dxkv


def model_forward(params: dict[str, np.ndarray], cfg: ModelConfig,
                  images: np.ndarray, mode: str, rng: RngStream | None = None,
                  daqs_indices_override: np.ndarray | None = None):
    """Run the detector. ``mode='train'`` enables the style-perturbation
    hooks (which consume ``rng``) and pins the selection projection factor
    to 1; ``mode='infer'`` skips perturbation, uses the configured
    inference projection factor, and never touches ``rng``.

    Returns ``(ModelOutputs, trace)``.
    """
    if mode not in ("train", "infer"):
        raise ContractViolationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ContractViolationError(f"expected (n, {cfg.in_channels}, h, w) images")
    hook_active = mode == "train" and cfg.wavenp.enabled
    if hook_active and rng is None:
        raise ContractViolationError("train mode with perturbation enabled needs an rng")

    trace: dict = {"mode": mode}
    x = images
    for i in range(1, 4):
        pre, cache = conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        act = relu(pre)
        trace[f"conv{i}"] = cache
        trace[f"pre{i}"] = pre
        if hook_active and i in cfg.wavenp.stages:
            act, wtrace = wavenp_forward(act, rng, cfg.wavenp)
            trace[f"wavenp{i}"] = wtrace
        x = act

    n, c, gh, gw = x.shape
    if gh * gw != cfg.grid_tokens:
        raise ContractViolationError(
            f"token grid {gh}x{gw} does not match configured {cfg.grid_tokens}")
    tokens = tokens_from_map(x) + params["pos.embed"]
    trace["grid_hw"] = (gh, gw)
    enc_tokens, enc_cache = _block_forward(tokens, tokens, params, "enc", cfg.heads)
    trace["enc"] = enc_cache
    enc_map = map_from_tokens(enc_tokens, gh, gw)

    dparams = daqs_params_view(params, cfg)
    eff_mode = mode if cfg.style_projection else "infer"
    selection, daqs_trace = daqs_forward(enc_map, dparams, eff_mode,
                                         indices_override=daqs_indices_override)
    trace["daqs"] = daqs_trace

    q = selection.queries
    for i in range(cfg.decoder_blocks):
        q, dec_cache = _block_forward(q, enc_tokens, params, f"dec{i}", cfg.heads)
        trace[f"dec{i}"] = dec_cache
    trace["dec_out"] = q

    class_logits = q @ params["head.cls.weight"].T + params["head.cls.bias"]
    box_logits = q @ params["head.box.weight"].T + params["head.box.bias"]
    # Selected tokens act as anchors: the box head predicts logit-space
    # offsets from the token's grid position and a prior size. The anchor
    # term follows the (constant) index choice and carries no gradient.
    anchors = _anchor_logits(selection.indices, gh, gw, cfg.anchor_size,
                             box_logits.dtype)
    outputs = ModelOutputs(
        class_logits=class_logits,
        class_probs=softmax(class_logits, axis=-1),
        box_logits=box_logits,
        boxes=sigmoid(box_logits + anchors),
        sel_scores=selection.scores,
        sel_indices=selection.indices,
        all_scores=daqs_trace.scores,
    )
    return outputs, trace


def model_backward(params: dict[str, np.ndarray], cfg: ModelConfig, trace: dict,
                   d_class_logits: np.ndarray, d_box_logits: np.ndarray,
                   d_sel_scores: np.ndarray,
                   d_all_scores: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar objective w.r.t. every parameter, given
    cotangents on the head logits and the selection scores. The top-K index
    choice and the matching are constants."""
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    d = cfg.d_model
    q_out = trace["dec_out"]

    flat_cls = d_class_logits.reshape(-1, d_class_logits.shape[-1])
    flat_box = d_box_logits.reshape(-1, 4)
    flat_q = q_out.reshape(-1, d)
    grads["head.cls.weight"] += flat_cls.T @ flat_q
    grads["head.cls.bias"] += flat_cls.sum(axis=0)
    grads["head.box.weight"] += flat_box.T @ flat_q
    grads["head.box.bias"] += flat_box.sum(axis=0)
    dq = d_class_logits @ params["head.cls.weight"] + d_box_logits @ params["head.box.weight"]

    d_enc_tokens = None
    for i in reversed(range(cfg.decoder_blocks)):
        dq, dmem = _block_vjp(trace[f"dec{i}"], params, f"dec{i}", cfg.heads, dq, grads)
        d_enc_tokens = dmem if d_enc_tokens is None else d_enc_tokens + dmem

    d_enc_map, daqs_grads = daqs_backward(trace["daqs"], dq, d_sel_scores,
                                          d_all_scores=d_all_scores)
    for key, g in daqs_grads.items():
        grads[f"daqs.{key}"] += g
    gh, gw = trace["grid_hw"]
    d_enc_tokens = d_enc_tokens + tokens_from_map(d_enc_map)

    d_tokens, _ = _block_vjp(trace["enc"], params, "enc", cfg.heads, d_enc_tokens, grads)
    grads["pos.embed"] += d_tokens.sum(axis=0)
    d_act = map_from_tokens(d_tokens, gh, gw)

    for i in (3, 2, 1):
        wtrace = trace.get(f"wavenp{i}")
        if wtrace is not None:
            d_act = wavenp_backward(wtrace, d_act)
        d_pre = relu_vjp(trace[f"pre{i}"], d_act)
        d_act, dw, db = conv2d_vjp(trace[f"conv{i}"], d_pre)
        grads[f"conv{i}.weight"] += dw
        grads[f"conv{i}.bias"] += db
    return grads
