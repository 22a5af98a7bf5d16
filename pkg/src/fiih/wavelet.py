"""Single-level orthonormal 2-D Haar transform.

Subband channel layout for a C-channel image is ``[LL*C, HL*C, LH*C, HH*C]``,
so an RGB image maps to ``[LL_R, LL_G, LL_B, HL_R, ..., HH_B]``. Both
directions accept ``(C, H, W)`` or batched ``(N, C, H, W)`` arrays, or
autodiff tensors of either shape.
"""

from __future__ import annotations

import numpy as np

from .numerics.tensor import NumericsError, Tensor, _as_array, linear_map

LAYOUT_VERSION = "haar-ll-hl-lh-hh-v1"


class WaveletError(NumericsError):
    pass


def _dwt(x: np.ndarray) -> np.ndarray:
    if x.ndim not in (3, 4):
        raise WaveletError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise WaveletError(f"Haar analysis needs even height and width, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    hl = (a - b + c - d) * 0.5
    lh = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.concatenate([ll, hl, lh, hh], axis=-3)


def _iwt(s: np.ndarray) -> np.ndarray:
    if s.ndim not in (3, 4):
        raise WaveletError(f"expected (4C,h,w) or (N,4C,h,w), got shape {s.shape}")
    ch = s.shape[-3]
    if ch % 4:
        raise WaveletError(f"subband tensor needs a channel count divisible by 4, got {ch}")
    ll, hl, lh, hh = np.split(s, 4, axis=-3)
    h, w = s.shape[-2:]
    out = np.empty(s.shape[:-3] + (ch // 4, 2 * h, 2 * w), dtype=s.dtype)
    out[..., 0::2, 0::2] = (ll + hl + lh + hh) * 0.5
    out[..., 0::2, 1::2] = (ll - hl + lh - hh) * 0.5
    out[..., 1::2, 0::2] = (ll + hl - lh - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - hl - lh + hh) * 0.5
    return out


def dwt_haar(image):
    """Analysis: ``C x H x W`` -> ``4C x H/2 x W/2``."""
    if isinstance(image, Tensor):
        return linear_map(image, _dwt, _iwt)
    return _dwt(_as_array(image))


def iwt_haar(subbands):
    """Synthesis, the exact inverse (and, being orthonormal, the adjoint) of :func:`dwt_haar`."""
    if isinstance(subbands, Tensor):
        return linear_map(subbands, _iwt, _dwt)
    return _iwt(_as_array(subbands))
