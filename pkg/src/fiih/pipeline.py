"""Hide / extract / reveal composition.

The secret alone passes through the coupling stack; the cover is only ever
combined with the network output by subtraction (``SUBTRACT``) or addition
(``ADD``). With a float-valued stego image the receiver recovers the secret to
rounding precision for any stack parameters.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .inn import CouplingStack, stack_forward, stack_inverse
from .numerics.tensor import NumericsError, Tensor, as_tensor, no_grad
from .wavelet import dwt_haar, iwt_haar


class PipelineError(NumericsError):
    pass


class HideMode(enum.Enum):
    SUBTRACT = "subtract"
    ADD = "add"

    @classmethod
    def parse(cls, value) -> HideMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise PipelineError(f"unknown hide mode {value!r}; expected 'subtract' or 'add'") from None


def to_planar(pixels: np.ndarray) -> np.ndarray:
    """8-bit ``H x W x 3`` pixels -> float64 ``3 x H x W`` in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PipelineError(f"expected uint8 HxWx3 pixels, got {pixels.dtype} {pixels.shape}")
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(planar: np.ndarray, floor: int = 0) -> np.ndarray:
    """Clamp to [0, 1], round to the 8-bit grid; returns uint8 ``3 x H x W``.

    ``floor=1`` lifts exact zeros to 1/255 so dropped pixels stay detectable.
    """
    q = np.rint(np.clip(np.asarray(planar, dtype=np.float64), 0.0, 1.0) * 255.0)
    return np.maximum(q, floor).astype(np.uint8)


def to_pixels(planar: np.ndarray, floor: int = 0) -> np.ndarray:
    return quantize(planar, floor).transpose(1, 2, 0).copy()


def dequantize(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / 255.0


def cover_id(cover: np.ndarray) -> str:
    """SHA-256 of the cover's 8-bit RGB bytes (row-major ``H x W x 3``)."""
    cover = np.asarray(cover)
    if cover.dtype == np.uint8 and cover.ndim == 3 and cover.shape[2] == 3:
        pixels = cover
    else:
        pixels = to_pixels(cover)
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


@dataclass
class StegoResult:
    stego: np.ndarray
    stego_quantized: np.ndarray
    encoded: np.ndarray
    residual_norm: float
    cover_id: str
    mode: HideMode

    @property
    def stego_pixels(self) -> np.ndarray:
        return self.stego_quantized.transpose(1, 2, 0).copy()


def encode(secret, stack: CouplingStack) -> Tensor:
    """Network half of hiding: ``iwt(I(dwt(secret)))`` on the tape."""
    return iwt_haar(stack_forward(dwt_haar(as_tensor(secret)), stack))


def combine(cover, encoded, mode: HideMode):
    mode = HideMode.parse(mode)
    return cover - encoded if mode is HideMode.SUBTRACT else cover + encoded


def _check_images(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise PipelineError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise PipelineError(f"{what}: expected C x H x W images, got {a.shape}")
    if a.shape[1] % 2 or a.shape[2] % 2:
        raise PipelineError(f"{what}: height and width must be even, got {a.shape[1]}x{a.shape[2]}")


def hide(secret, cover, stack: CouplingStack, mode=HideMode.SUBTRACT, floor: int = 0) -> StegoResult:
    secret = np.asarray(secret, dtype=np.float64)
    cover = np.asarray(cover, dtype=np.float64)
    _check_images(secret, cover, "hide")
    mode = HideMode.parse(mode)
    with no_grad():
        s_e = encode(secret.astype(stack.dtype), stack).data.astype(np.float64)
    stego = combine(cover, s_e, mode)
    return StegoResult(
        stego=stego,
        stego_quantized=quantize(stego, floor),
        encoded=s_e,
        residual_norm=float(np.linalg.norm(s_e)),
        cover_id=cover_id(cover),
        mode=mode,
    )


def extract(stego, cover, mode=HideMode.SUBTRACT) -> np.ndarray:
    """Recover the encoded residual from a stego image and its cover. No clamping."""
    stego = np.asarray(stego, dtype=np.float64)
    cover = np.asarray(cover, dtype=np.float64)
    if stego.shape != cover.shape:
        raise PipelineError(f"extract: shape mismatch {stego.shape} vs {cover.shape}")
    mode = HideMode.parse(mode)
    return cover - stego if mode is HideMode.SUBTRACT else stego - cover


def reveal(encoded, stack: CouplingStack) -> np.ndarray:
    encoded = np.asarray(encoded, dtype=stack.dtype)
    if encoded.ndim != 3 or encoded.shape[1] % 2 or encoded.shape[2] % 2:
        raise PipelineError(f"reveal: expected C x H x W with even H, W; got {encoded.shape}")
    with no_grad():
        return iwt_haar(stack_inverse(dwt_haar(encoded), stack)).data.astype(np.float64)


def reveal_tensor(encoded, stack: CouplingStack) -> Tensor:
    """Differentiable reveal, for training."""
    return iwt_haar(stack_inverse(dwt_haar(as_tensor(encoded)), stack))
