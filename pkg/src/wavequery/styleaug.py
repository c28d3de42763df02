"""Low-frequency style perturbation of feature maps.

The augmentation decomposes a feature map with a single-level Haar
transform, re-randomizes the channel statistics of the low-frequency band
only, and reconstructs. The perturbation rewrites each (sample, channel)
plane ``x`` of the LL band as

    y = scale * sigma_c * (x - mu_c) / (sigma_c + eps) + shift * mu_c

where ``(mu_c, sigma_c)`` are the plane's own mean/std and ``scale``,
``shift`` are mean-1 Gaussian noise factors drawn once per forward call.
Detail bands pass through untouched, so edges and shapes encoded in the
high-frequency bands are preserved exactly. Training-only: a disabled
config makes the forward the identity.

For ablation runs the perturbation can instead target the three detail
bands (``perturb_bands="high"``), leaving LL untouched — the inverted
variant that is expected to hurt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import SIGMA_EPS, ContractViolationError, RngStream, channel_stats
from .wavelet import SubBands, dwt2, dwt2_vjp, idwt2, idwt2_vjp


@dataclass(frozen=True)
class NoiseSample:
    """Mean-1 multiplicative noise on the channel statistics: ``scale``
    multiplies sigma, ``shift`` multiplies mu. Drawn once per forward call
    and held constant through that call's backward."""

    scale: np.ndarray  # (n, c)
    shift: np.ndarray  # (n, c)


@dataclass(frozen=True)
class WaveNPConfig:
    """Configuration for the wavelet-domain statistics perturbation."""

    sigma_np: float = 0.5          # noise std around 1
    stages: tuple[int, ...] = (1, 2)  # backbone stages hooked during training
    apply_prob: float = 1.0        # chance a training batch is perturbed
    enabled: bool = True           # False => forward is the identity
    perturb_bands: str = "low"     # "low" (LL) or "high" (LH/HL/HH, ablation)

    def __post_init__(self):
        if self.sigma_np < 0:
            raise ContractViolationError("sigma_np must be >= 0")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ContractViolationError("apply_prob must be in [0, 1]")
        if self.perturb_bands not in ("low", "high"):
            raise ContractViolationError("perturb_bands must be 'low' or 'high'")


def sample_noise(rng: RngStream, n: int, c: int, cfg: WaveNPConfig) -> NoiseSample:
    """Draw i.i.d. Normal(1, sigma_np^2) scale/shift factors per (sample, channel)."""
    scale = rng.normal(1.0, cfg.sigma_np, size=(n, c))
    shift = rng.normal(1.0, cfg.sigma_np, size=(n, c))
    return NoiseSample(scale=scale, shift=shift)


def normalization_perturbation(f: np.ndarray, noise: NoiseSample,
                               eps: float = SIGMA_EPS) -> np.ndarray:
    """Re-affine each (sample, channel) plane with noise-scaled versions of
    its own statistics. Output stats land on
    ``(shift*mu_c, scale*sigma_c*sigma_c/(sigma_c+eps))``."""
    if noise.scale.shape != f.shape[:2] or noise.shift.shape != f.shape[:2]:
        raise ContractViolationError(
            f"noise shape {noise.scale.shape} does not match (n, c) of {f.shape}")
    stats = channel_stats(f)
    mu = stats.mu[:, :, None, None]
    sigma = stats.sigma[:, :, None, None]
    scale = noise.scale[:, :, None, None].astype(f.dtype, copy=False)
    shift = noise.shift[:, :, None, None].astype(f.dtype, copy=False)
    return scale * sigma * (f - mu) / (sigma + eps) + shift * mu


def normalization_perturbation_vjp(f: np.ndarray, noise: NoiseSample,
                                   upstream: np.ndarray,
                                   eps: float = SIGMA_EPS) -> np.ndarray:
    """VJP of :func:`normalization_perturbation` w.r.t. the features,
    differentiating through mu_c and sigma_c (full instance-norm Jacobian);
    the noise is a constant."""
    if upstream.shape != f.shape:
        raise ContractViolationError(
            f"upstream shape {upstream.shape} != input shape {f.shape}")
    n, c, h, w = f.shape
    count = h * w
    stats = channel_stats(f)
    mu = stats.mu[:, :, None, None]
    sigma = stats.sigma[:, :, None, None]
    scale = noise.scale[:, :, None, None].astype(f.dtype, copy=False)
    shift = noise.shift[:, :, None, None].astype(f.dtype, copy=False)

    centered = f - mu
    gain = scale * sigma / (sigma + eps)            # d y / d x at fixed stats
    dgain = scale * eps / (sigma + eps) ** 2        # d gain / d sigma
    u_sum = upstream.sum(axis=(2, 3), keepdims=True)
    u_dot = (upstream * centered).sum(axis=(2, 3), keepdims=True)
    # d sigma / d x_j = centered_j / (count * sigma); guarded at sigma == 0
    # (the centered factor is then identically zero as well).
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    dsigma_dx = np.where(sigma > 0, centered / (count * safe_sigma), 0.0)
    return (gain * (upstream - u_sum / count)
            + dgain * u_dot * dsigma_dx
            + shift * u_sum / count)


@dataclass
class WaveNPTrace:
    """Per-call record required by the backward pass."""

    applied: bool
    input_shape: tuple[int, ...]
    bands: SubBands | None = None
    noise: NoiseSample | None = None                  # LL noise ("low" mode)
    detail_noise: tuple[NoiseSample, NoiseSample, NoiseSample] | None = None
    eps: float = SIGMA_EPS


def wavenp_forward(f: np.ndarray, rng: RngStream, cfg: WaveNPConfig,
                   noise_override: NoiseSample | None = None):
    """Perturb the low-frequency band of ``f`` and reconstruct.

    Returns ``(f_hat, trace)``. When the config is disabled or the
    apply-probability draw fails, ``f_hat`` is ``f`` itself (arrays are
    treated as immutable values throughout the package). ``noise_override``
    pins the LL noise for finite-difference checks and targeted tests.
    """
    if not cfg.enabled:
        return f, WaveNPTrace(applied=False, input_shape=f.shape)
    if cfg.apply_prob < 1.0 and float(rng.uniform()) >= cfg.apply_prob:
        return f, WaveNPTrace(applied=False, input_shape=f.shape)

    n, c = f.shape[:2]
    bands = dwt2(f)
    if cfg.perturb_bands == "low":
        noise = noise_override if noise_override is not None else sample_noise(rng, n, c, cfg)
        perturbed = SubBands(
            ll=normalization_perturbation(bands.ll, noise),
            lh=bands.lh, hl=bands.hl, hh=bands.hh, pad_info=bands.pad_info)
        trace = WaveNPTrace(applied=True, input_shape=f.shape, bands=bands, noise=noise)
    else:
        detail_noise = tuple(sample_noise(rng, n, c, cfg) for _ in range(3))
        perturbed = SubBands(
            ll=bands.ll,
            lh=normalization_perturbation(bands.lh, detail_noise[0]),
            hl=normalization_perturbation(bands.hl, detail_noise[1]),
            hh=normalization_perturbation(bands.hh, detail_noise[2]),
            pad_info=bands.pad_info)
        trace = WaveNPTrace(applied=True, input_shape=f.shape, bands=bands,
                            detail_noise=detail_noise)
    return idwt2(perturbed), trace


def wavenp_backward(trace: WaveNPTrace, upstream: np.ndarray) -> np.ndarray:
    """VJP of :func:`wavenp_forward` w.r.t. the input map: synthesis
    backward, perturbation backward on the touched band(s), analysis
    backward. Identity forwards backpropagate the cotangent unchanged."""
    if upstream.shape != trace.input_shape:
        raise ContractViolationError(
            f"stale trace: upstream shape {upstream.shape} "
            f"!= forward input shape {trace.input_shape}")
    if not trace.applied:
        return upstream

    cot = idwt2_vjp(upstream)
    bands = trace.bands
    if trace.noise is not None:
        d_ll = normalization_perturbation_vjp(bands.ll, trace.noise, cot.ll, trace.eps)
        d_bands = SubBands(d_ll, cot.lh, cot.hl, cot.hh, pad_info=bands.pad_info)
    else:
        d_lh = normalization_perturbation_vjp(bands.lh, trace.detail_noise[0], cot.lh, trace.eps)
        d_hl = normalization_perturbation_vjp(bands.hl, trace.detail_noise[1], cot.hl, trace.eps)
        d_hh = normalization_perturbation_vjp(bands.hh, trace.detail_noise[2], cot.hh, trace.eps)
        d_bands = SubBands(cot.ll, d_lh, d_hl, d_hh, pad_info=bands.pad_info)
    return dwt2_vjp(d_bands, pad_info=bands.pad_info)
