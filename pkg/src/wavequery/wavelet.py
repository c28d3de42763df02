"""Single-level 2-D Haar analysis and synthesis over (n, c, h, w) feature maps.

Filter convention: low-pass ``L = [1/sqrt(2), 1/sqrt(2)]``, high-pass
``H = [-1/sqrt(2), 1/sqrt(2)]``, applied with stride 2 along width then
height. Band naming is fixed here because library conventions vary:

* ``lh``: width-axis high-pass, height-axis low-pass (horizontal detail),
* ``hl``: height-axis high-pass, width-axis low-pass (vertical detail),
* ``hh``: high-pass along both axes (diagonal detail).

With even spatial sizes the stride-2 2x2 windows tile exactly and the
transform is orthonormal: analysis and synthesis are exact inverses, energy
is preserved, and each backward pass is the opposite transform applied to
the cotangent. Odd sizes are reflect-padded on the bottom/right edge; the
original size is recorded in ``pad_info`` and restored on synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ContractViolationError, check_feature_map


@dataclass
class SubBands:
    """The four half-resolution wavelet bands of one feature map."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    pad_info: tuple[int, int] | None = None  # original (h, w) before padding

    def bands(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.ll, self.lh, self.hl, self.hh


def _check_bands(s: SubBands) -> None:
    shapes = {band.shape for band in s.bands()}
    if len(shapes) != 1:
        raise ContractViolationError(f"sub-band shapes differ: {sorted(shapes)}")
    if s.ll.ndim != 4:
        raise ContractViolationError(f"sub-bands must be rank 4, got {s.ll.shape}")
    if s.pad_info is not None:
        h, w = s.pad_info
        bh, bw = s.ll.shape[2], s.ll.shape[3]
        if (h + 1) // 2 != bh or (w + 1) // 2 != bw:
            raise ContractViolationError(
                f"pad_info {s.pad_info} inconsistent with band shape {s.ll.shape}")


def _mirror_index(size: int) -> int:
    # Reflect about the last sample; degenerate size-1 axes repeat sample 0.
    return size - 2 if size >= 2 else 0


def _pad_to_even(f: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    n, c, h, w = f.shape
    if h % 2:
        f = np.concatenate([f, f[:, :, _mirror_index(h):_mirror_index(h) + 1, :]], axis=2)
    if w % 2:
        f = np.concatenate([f, f[:, :, :, _mirror_index(w):_mirror_index(w) + 1]], axis=3)
    return f, (h, w)


def _fold_pad(y: np.ndarray, orig_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_pad_to_even`: add the padded row/col cotangent back
    onto its mirror source, then crop. Mutates ``y`` (callers pass fresh
    synthesis output)."""
    h, w = orig_hw
    if y.shape[3] > w:
        y[:, :, :, _mirror_index(w)] += y[:, :, :, w]
        y = y[:, :, :, :w]
    if y.shape[2] > h:
        y[:, :, _mirror_index(h), :] += y[:, :, h, :]
        y = y[:, :, :h, :]
    return y


def _analyze(fp: np.ndarray):
    """Stride-2 separable Haar analysis of an even-sized map."""
    a = fp[:, :, 0::2, 0::2]
    b = fp[:, :, 0::2, 1::2]
    c = fp[:, :, 1::2, 0::2]
    d = fp[:, :, 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (-a + b - c + d) * 0.5
    hl = (-a - b + c + d) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, lh, hl, hh


def _synthesize(s: SubBands) -> np.ndarray:
    """Inverse of :func:`_analyze` (the transform is orthonormal, so this is
    also its transpose). Output has even spatial sizes, uncropped."""
    ll, lh, hl, hh = s.bands()
    n, c, bh, bw = ll.shape
    y = np.empty((n, c, 2 * bh, 2 * bw), dtype=ll.dtype)
    y[:, :, 0::2, 0::2] = (ll - lh - hl + hh) * 0.5
    y[:, :, 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    y[:, :, 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    y[:, :, 1::2, 1::2] = (ll + lh + hl + hh) * 0.5
    return y


def dwt2(f: np.ndarray) -> SubBands:
    """Decompose a feature map into its four Haar sub-bands."""
    check_feature_map(f)
    fp, orig_hw = _pad_to_even(f)
    ll, lh, hl, hh = _analyze(fp)
    return SubBands(ll, lh, hl, hh, pad_info=orig_hw)


def idwt2(s: SubBands) -> np.ndarray:
    """Reconstruct a feature map from its sub-bands; exact inverse of
    :func:`dwt2`, cropping any reflect padding per ``pad_info``."""
    _check_bands(s)
    y = _synthesize(s)
    if s.pad_info is not None:
        h, w = s.pad_info
        y = y[:, :, :h, :w]
    return y


def dwt2_vjp(upstream: SubBands, pad_info: tuple[int, int] | None = None) -> np.ndarray:
    """VJP of :func:`dwt2`: synthesis of the cotangent bands, with the pad
    adjoint folding the mirrored row/col gradient back onto its source."""
    _check_bands(upstream)
    if pad_info is None:
        pad_info = upstream.pad_info
    y = _synthesize(upstream)
    if pad_info is not None:
        y = _fold_pad(y, pad_info)
    return y


def idwt2_vjp(upstream: np.ndarray) -> SubBands:
    """VJP of :func:`idwt2`: the crop adjoint zero-pads the cotangent back to
    even sizes, then analysis maps it onto the bands."""
    if upstream.ndim != 4:
        raise ContractViolationError(f"upstream must be rank 4, got {upstream.shape}")
    n, c, h, w = upstream.shape
    if h % 2 or w % 2:
        padded = np.zeros((n, c, h + h % 2, w + w % 2), dtype=upstream.dtype)
        padded[:, :, :h, :w] = upstream
    else:
        padded = upstream
    ll, lh, hl, hh = _analyze(padded)
    return SubBands(ll, lh, hl, hh, pad_info=(h, w))


def wavelet_backward(kind: str, upstream, pad_info: tuple[int, int] | None = None):
    """Dispatch the VJP of the analysis or synthesis direction.

    ``kind='analysis'`` takes cotangent :class:`SubBands` and returns the
    input-map cotangent; ``kind='synthesis'`` takes a cotangent map and
    returns cotangent bands.
    """
    if kind == "analysis":
        if not isinstance(upstream, SubBands):
            raise ContractViolationError("analysis backward expects SubBands upstream")
        return dwt2_vjp(upstream, pad_info=pad_info)
    if kind == "synthesis":
        upstream = np.asarray(upstream)
        return idwt2_vjp(upstream)
    raise ContractViolationError(f"unknown kind {kind!r}; use 'analysis' or 'synthesis'")
