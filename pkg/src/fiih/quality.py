"""Image quality metrics and the weighted hiding/revealing training loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics.tensor import NumericsError, Tensor, as_tensor, mean, mul, square, sub, total

INFINITE_PSNR = math.inf


class MetricError(NumericsError):
    pass


@dataclass(frozen=True)
class LossWeights:
    hide_mse: float = 50.0
    hide_ssim: float = 50.0
    reveal_mse: float = 1.0
    reveal_ssim: float = 1.0
    # compare secret against cover in the reveal-MSE term, as literally printed
    literal_reveal_mse: bool = False

    def __post_init__(self):
        for name in ("hide_mse", "hide_ssim", "reveal_mse", "reveal_ssim"):
            if getattr(self, name) < 0:
                raise MetricError(f"loss weight {name} must be non-negative")


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    mse: float

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.psnr_db):
            d["psnr_db"] = "inf"
        return d

    def csv_fields(self) -> list[str]:
        return ["inf" if math.isinf(self.psnr_db) else repr(self.psnr_db), repr(self.ssim), repr(self.mse)]


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared difference over every element, channels included."""
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return INFINITE_PSNR
    return float(10.0 * np.log10(max_value**2 / err))


def ssim_constants(max_value: float) -> tuple[float, float]:
    return (0.01 * max_value) ** 2, (0.03 * max_value) ** 2


def ssim_global(a, b, max_value: float = 1.0) -> float:
    """SSIM from whole-image statistics, per channel, averaged over channels.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)``; a batch averages over images too.
    """
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise MetricError("ssim_global needs at least a 2-D image")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c, d = ssim_constants(max_value)
    axes = (-2, -1)
    mu_a = a.mean(axis=axes)
    mu_b = b.mean(axis=axes)
    da = a - mu_a[..., None, None]
    db = b - mu_b[..., None, None]
    var_a = (da * da).mean(axis=axes)
    var_b = (db * db).mean(axis=axes)
    cov = (da * db).mean(axis=axes)
    s = ((2 * mu_a * mu_b + c) * (2 * cov + d)) / ((mu_a**2 + mu_b**2 + c) * (var_a + var_b + d))
    return float(s.mean())


def report(a, b, max_value: float = 1.0) -> MetricReport:
    return MetricReport(psnr(a, b, max_value), ssim_global(a, b, max_value), mse(a, b))


# differentiable versions


def mse_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


def ssim_loss(a, b, max_value: float = 1.0) -> Tensor:
    """``1 - ssim_global(a, b)`` on the tape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise MetricError("ssim_loss needs at least a 2-D image")
    c, d = ssim_constants(max_value)
    axes = (a.ndim - 2, a.ndim - 1)
    mu_a = mean(a, axis=axes, keepdims=True)
    mu_b = mean(b, axis=axes, keepdims=True)
    da = a - mu_a
    db = b - mu_b
    var_a = mean(square(da), axis=axes, keepdims=True)
    var_b = mean(square(db), axis=axes, keepdims=True)
    cov = mean(da * db, axis=axes, keepdims=True)
    num = (mu_a * mu_b * 2.0 + c) * (cov * 2.0 + d)
    den = (square(mu_a) + square(mu_b) + c) * (var_a + var_b + d)
    return sub(1.0, mean(num / den))


def total_loss(cover, stego, secret, recovery, w: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of hiding MSE/SSIM and revealing MSE/SSIM terms."""
    shapes = {as_tensor(t).shape for t in (cover, stego, secret, recovery)}
    if len(shapes) != 1:
        raise MetricError(f"total_loss inputs disagree in shape: {sorted(shapes)}")
    reveal_ref = cover if w.literal_reveal_mse else recovery
    terms = [
        (w.hide_mse, lambda: mse_loss(stego, cover)),
        (w.hide_ssim, lambda: ssim_loss(stego, cover)),
        (w.reveal_mse, lambda: mse_loss(reveal_ref, secret)),
        (w.reveal_ssim, lambda: ssim_loss(recovery, secret)),
    ]
    loss = None
    for weight, term in terms:
        if weight == 0:
            continue
        part = mul(term(), weight)
        loss = part if loss is None else loss + part
    if loss is None:
        loss = total(mul(as_tensor(stego), 0.0))
    return loss
