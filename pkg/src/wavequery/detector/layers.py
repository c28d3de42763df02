"""Hand-differentiated layer primitives for the toy detector.

Each forward returns whatever its VJP needs (caches are plain tuples or
small dataclasses); there is no graph. Convolutions are materialized as
patch tensors and einsums, which is plenty fast at desk scale and makes
the adjoint a literal mirror of the forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ContractViolationError


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_vjp(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP given the forward output ``y = sigmoid(x)``."""
    return upstream * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """VJP given the forward output ``y = softmax(x)``."""
    inner = (upstream * y).sum(axis=axis, keepdims=True)
    return y * (upstream - inner)


# ---------------------------------------------------------------------------
# Strided convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvCache:
    x_shape: tuple[int, ...]
    patches: np.ndarray  # (n, cin, kh, kw, oh, ow)
    weight: np.ndarray
    stride: int
    pad: int


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 2, pad: int = 1):
    """Strided 2-D convolution over (n, cin, h, w). Returns (y, cache)."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ContractViolationError(f"conv2d: input channels {cin} != weight {cin_w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    patches = np.empty((n, cin, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                     j:j + stride * ow:stride]
    y = np.einsum("ncijhw,dcij->ndhw", patches, weight, optimize=True)
    y += bias.reshape(1, -1, 1, 1)
    return y, ConvCache(x.shape, patches, weight, stride, pad)


def conv2d_vjp(cache: ConvCache, upstream: np.ndarray):
    """Returns (dx, dweight, dbias)."""
    n, cin, h, w = cache.x_shape
    stride, pad = cache.stride, cache.pad
    kh, kw = cache.weight.shape[2:]
    oh, ow = upstream.shape[2:]
    dweight = np.einsum("ndhw,ncijhw->dcij", upstream, cache.patches, optimize=True)
    dbias = upstream.sum(axis=(0, 2, 3))
    dpatches = np.einsum("ndhw,dcij->ncijhw", upstream, cache.weight, optimize=True)
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=upstream.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dpatches[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# Multi-head attention (self- or cross-)
# ---------------------------------------------------------------------------

@dataclass
class AttentionCache:
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray     # (n, heads, tq, dh)
    k: np.ndarray     # (n, heads, tk, dh)
    v: np.ndarray     # (n, heads, tk, dh)
    attn: np.ndarray  # (n, heads, tq, tk)
    ctx: np.ndarray   # (n, tq, d) merged context before output projection
    self_attention: bool


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n, heads, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, heads * dh)


def attention(xq: np.ndarray, xkv: np.ndarray, p: dict, heads: int):
    """Multi-head scaled dot-product attention.

    ``p`` holds wq/bq, wk/bk, wv/bv, wo/bo with (d, d) weights. Queries come
    from ``xq``; keys and values from ``xkv`` (pass the same array for
    self-attention). Returns (y, cache).
    """
    d = xq.shape[-1]
    if d % heads:
        raise ContractViolationError(f"model dim {d} not divisible by {heads} heads")
    q = _split_heads(xq @ p["wq"].T + p["bq"], heads)
    k = _split_heads(xkv @ p["wk"].T + p["bk"], heads)
    v = _split_heads(xkv @ p["wv"].T + p["bv"], heads)
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d // heads)
    attn = softmax(logits, axis=-1)
    ctx = _merge_heads(attn @ v)
    y = ctx @ p["wo"].T + p["bo"]
    return y, AttentionCache(xq, xkv, q, k, v, attn, ctx, xq is xkv)


def attention_vjp(cache: AttentionCache, p: dict, heads: int, upstream: np.ndarray):
    """Returns (dxq, dxkv, param_grads dict). For self-attention the query
    and key/value cotangents are already summed into ``dxq`` (and ``dxkv``
    is the same array)."""
    d = cache.xq.shape[-1]
    dh = d // heads
    grads = {}

    u2 = upstream.reshape(-1, d)
    grads["wo"] = u2.T @ cache.ctx.reshape(-1, d)
    grads["bo"] = u2.sum(axis=0)
    dctx = _split_heads(upstream @ p["wo"], heads)

    dattn = dctx @ cache.v.transpose(0, 1, 3, 2)
    dv = cache.attn.transpose(0, 1, 3, 2) @ dctx
    dlogits = softmax_vjp(cache.attn, dattn) / np.sqrt(dh)
    dq = dlogits @ cache.k
    dk = dlogits.transpose(0, 1, 3, 2) @ cache.q

    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    for name, du, x in (("q", dq_m, cache.xq), ("k", dk_m, cache.xkv),
                        ("v", dv_m, cache.xkv)):
        du2 = du.reshape(-1, d)
        grads["w" + name] = du2.T @ x.reshape(-1, d)
        grads["b" + name] = du2.sum(axis=0)

    dxq = dq_m @ p["wq"]
    dxkv = dk_m @ p["wk"] + dv_m @ p["wv"]
    if cache.self_attention:
        dxq = dxq + dxkv
        dxkv = dxq
    return dxq, dxkv, grads
