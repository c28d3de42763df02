"""Numeric foundation shared by every other module.

Feature maps are plain numpy arrays laid out ``(n, c, h, w)`` — channel-major,
so per-channel statistics and separable spatial filtering touch contiguous
memory. There is no autodiff graph in this package: every operation that
participates in training ships an explicit vector-Jacobian product (VJP)
right next to its forward pass, and :func:`finite_diff_vjp_check` is the
central-difference oracle that keeps those hand-written backwards honest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Stabilizer added to sigma wherever features are divided by a standard
# deviation, so constant channels (sigma == 0) stay finite.
SIGMA_EPS = 1e-5

# Variance stabilizer for layer normalization.
LAYER_NORM_EPS = 1e-5


class ContractViolationError(ValueError):
    """An operation was called with arguments that violate its contract."""


def check_feature_map(f: np.ndarray) -> None:
    """Validate the (n, c, h, w) feature-map contract: rank 4, all dims >= 1,
    finite values."""
    f = np.asarray(f)
    if f.ndim != 4:
        raise ContractViolationError(f"feature map must be rank 4, got shape {f.shape}")
    if min(f.shape) < 1:
        raise ContractViolationError(f"feature map dims must be >= 1, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ContractViolationError("feature map contains non-finite values")


# ---------------------------------------------------------------------------
# Per-channel statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    """Per-(sample, channel) mean and population standard deviation, computed
    over the spatial dims only (never across the batch)."""

    mu: np.ndarray     # (n, c)
    sigma: np.ndarray  # (n, c), >= 0


def channel_stats(f: np.ndarray) -> ChannelStats:
    """Mean and population std (divisor h*w) of each (sample, channel) plane."""
    f = np.asarray(f)
    if f.ndim != 4:
        raise ContractViolationError(f"expected (n, c, h, w), got shape {f.shape}")
    mu = f.mean(axis=(2, 3))
    sigma = f.std(axis=(2, 3))  # ddof=0: population convention
    return ChannelStats(mu=mu, sigma=sigma)


# ---------------------------------------------------------------------------
# Linear / layer-norm primitives
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    """Weights of an affine map: ``y = weight @ x + bias``."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray    # (d_out,)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


def linear_apply(x: np.ndarray, p: LinearParams) -> np.ndarray:
    """Apply ``y = weight @ x + bias`` along the last axis of ``x``."""
    x = np.asarray(x)
    if x.shape[-1] != p.d_in:
        raise ContractViolationError(
            f"linear_apply: input dim {x.shape[-1]} != weight d_in {p.d_in}")
    return x @ p.weight.T + p.bias


def linear_vjp(x: np.ndarray, p: LinearParams, upstream: np.ndarray):
    """VJP of :func:`linear_apply`. Returns ``(dx, dweight, dbias)``; the
    parameter cotangents are summed over all leading (batch) axes."""
    u2 = upstream.reshape(-1, p.d_out)
    x2 = x.reshape(-1, p.d_in)
    dx = upstream @ p.weight
    dweight = u2.T @ x2
    dbias = u2.sum(axis=0)
    return dx, dweight, dbias


def layer_normalize(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize over the last axis (population variance) and re-affine:
    ``(x - mean) / sqrt(var + eps) * gamma + beta``."""
    if eps <= 0:
        raise ContractViolationError("layer_normalize: eps must be > 0")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_normalize_vjp(x: np.ndarray, gamma: np.ndarray, upstream: np.ndarray,
                        eps: float = LAYER_NORM_EPS):
    """VJP of :func:`layer_normalize`. Returns ``(dx, dgamma, dbeta)``."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    g = upstream * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(upstream.ndim - 1))
    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Counter-based randomness
# ---------------------------------------------------------------------------

class RngStream:
    """Deterministic counter-based random stream.

    Every draw opens a fresh Philox generator keyed by ``(seed, counter)``
    and bumps the counter, so a given (seed, counter) pair reproduces the
    same values on any platform regardless of how many values earlier calls
    consumed. Sub-streams are derived by spacing counters (see ``at``).
    """

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & self._MASK
        self.counter = int(counter) & self._MASK

    def _generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter = (self.counter + 1) & self._MASK
        return g

    def at(self, counter: int) -> "RngStream":
        """Independent stream with the same seed at an explicit counter."""
        return RngStream(self.seed, counter)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None,
               dtype=np.float64) -> np.ndarray:
        if std < 0:
            raise ContractViolationError("normal: std must be >= 0")
        z = self._generator().standard_normal(size)
        return np.asarray(mean + std * z, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return np.asarray(self._generator().uniform(low, high, size))

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return np.asarray(self._generator().integers(low, high, size))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)


def sample_gaussian(rng: RngStream, mean: float, std: float, count: int) -> np.ndarray:
    """``count`` i.i.d. Normal(mean, std^2) draws; advances the stream."""
    if std < 0:
        raise ContractViolationError("sample_gaussian: std must be >= 0")
    return rng.normal(mean, std, size=int(count))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def _output_leaves(y):
    return list(y) if isinstance(y, (tuple, list)) else [y]


def _contract(y, u) -> float:
    """Sum of <leaf, u_leaf> over the output structure."""
    y_leaves = _output_leaves(y)
    u_leaves = _output_leaves(u)
    if len(y_leaves) != len(u_leaves):
        raise ContractViolationError("upstream structure does not match forward output")
    return float(sum(np.vdot(a, b) for a, b in zip(y_leaves, u_leaves)))


def finite_diff_vjp_check(forward, backward, x: np.ndarray, u, h: float = 1e-5) -> float:
    """Compare a hand-written VJP against central finite differences.

    ``forward`` maps an array to an array (or tuple of arrays) and must be
    deterministic (any internal noise held fixed). ``backward(x, u)`` returns
    the cotangent of ``x`` for upstream ``u`` matching the output structure.
    Returns the max relative error over coordinates of ``x``, with
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ContractViolationError("finite_diff_vjp_check: h must be > 0")
    x = np.array(x, dtype=np.float64)
    y0 = forward(x)
    for leaf in _output_leaves(y0):
        if not np.all(np.isfinite(leaf)):
            raise ContractViolationError("forward produced non-finite output")
    analytic = np.asarray(backward(x, u), dtype=np.float64)
    if analytic.shape != x.shape:
        raise ContractViolationError(
            f"backward returned shape {analytic.shape}, expected {x.shape}")

    numeric = np.empty_like(x)
    xp = x.copy()
    for i in range(x.size):
        orig = xp.flat[i]
        xp.flat[i] = orig + h
        fp = _contract(forward(xp), u)
        xp.flat[i] = orig - h
        fm = _contract(forward(xp), u)
        xp.flat[i] = orig
        numeric.flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# Feature-map dump format (binary, little-endian) used by golden-file tests:
# magic "DGFM", u32 version=1, u32 n,c,h,w, u8 dtype tag (4=f32, 8=f64),
# then raw row-major values.
# ---------------------------------------------------------------------------

_DGFM_MAGIC = b"DGFM"
_DGFM_VERSION = 1
_DGFM_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_feature_map(path, f: np.ndarray) -> None:
    check_feature_map(f)
    f = np.ascontiguousarray(f)
    if f.dtype == np.float32:
        tag = 4
    elif f.dtype == np.float64:
        tag = 8
    else:
        raise ContractViolationError(f"unsupported dtype {f.dtype}; use f32 or f64")
    header = struct.pack("<4sIIIIIB", _DGFM_MAGIC, _DGFM_VERSION, *f.shape, tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.astype(_DGFM_DTYPES[tag], copy=False).tobytes(order="C"))


def load_feature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIIIIB"))
        magic, version, n, c, h, w, tag = struct.unpack("<4sIIIIIB", header)
        if magic != _DGFM_MAGIC:
            raise ContractViolationError(f"bad magic {magic!r}")
        if version != _DGFM_VERSION:
            raise ContractViolationError(f"unsupported version {version}")
        if tag not in _DGFM_DTYPES:
            raise ContractViolationError(f"unknown dtype tag {tag}")
        dt = _DGFM_DTYPES[tag]
        raw = fh.read(n * c * h * w * dt.itemsize)
    values = np.frombuffer(raw, dtype=dt)
    if values.size != n * c * h * w:
        raise ContractViolationError("truncated feature-map file")
    native = np.float32 if tag == 4 else np.float64
    return values.astype(native).reshape(n, c, h, w)
