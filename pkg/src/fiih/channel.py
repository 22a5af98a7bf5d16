"""Channel distortions applied to stego images, and dropout restoration.

All attacks take and return float ``3 x H x W`` images in [0, 1] and are
deterministic for a given seed. Gaussian ``sigma`` is a standard deviation on
the 0-255 scale.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .numerics.tensor import NumericsError, Tensor, as_tensor, clip, getitem, linear_map, mul, straight_through
from .pipeline import HideMode


class AttackError(NumericsError):
    pass


ATTACK_KINDS = ("gaussian", "dropout", "jpeg")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    sigma: float = 0.0
    ratio: float = 0.0
    qf: int = 100
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.sigma < 0:
            raise AttackError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.ratio <= 1.0:
            raise AttackError(f"dropout ratio must lie in [0, 1], got {self.ratio}")
        if not (isinstance(self.qf, (int, np.integer)) and 1 <= self.qf <= 100):
            raise AttackError(f"JPEG quality factor must be an integer in [1, 100], got {self.qf!r}")

    @classmethod
    def gaussian(cls, sigma: float, seed: int | None = None) -> AttackSpec:
        return cls("gaussian", sigma=float(sigma), seed=seed)

    @classmethod
    def dropout(cls, ratio: float, seed: int | None = None) -> AttackSpec:
        return cls("dropout", ratio=float(ratio), seed=seed)

    @classmethod
    def jpeg(cls, qf: int) -> AttackSpec:
        return cls("jpeg", qf=qf)

    @property
    def level(self):
        return {"gaussian": self.sigma, "dropout": self.ratio, "jpeg": self.qf}[self.kind]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, {"gaussian": "sigma", "dropout": "ratio", "jpeg": "qf"}[self.kind]: self.level}
        if self.seed is not None and self.kind != "jpeg":
            d["seed"] = self.seed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> AttackSpec:
        if not isinstance(d, dict) or "kind" not in d:
            raise AttackError(f"attack spec must be an object with a 'kind' field, got {d!r}")
        allowed = {"gaussian": {"sigma", "seed"}, "dropout": {"ratio", "seed"}, "jpeg": {"qf"}}
        kind = d["kind"]
        if kind not in allowed:
            raise AttackError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
        extra = set(d) - allowed[kind] - {"kind"}
        if extra:
            raise AttackError(f"unexpected field(s) for {kind} attack: {sorted(extra)}")
        if kind == "gaussian":
            return cls.gaussian(d.get("sigma", 0.0), d.get("seed"))
        if kind == "dropout":
            return cls.dropout(d.get("ratio", 0.0), d.get("seed"))
        qf = d.get("qf", 100)
        if isinstance(qf, float) and qf.is_integer():
            qf = int(qf)
        return cls.jpeg(qf)

    @classmethod
    def from_json(cls, text: str) -> AttackSpec:
        return cls.from_dict(json.loads(text))


# Gaussian noise


def attack_gaussian(stego, sigma: float, seed=None) -> np.ndarray:
    if sigma < 0:
        raise AttackError(f"sigma must be >= 0, got {sigma}")
    stego = np.asarray(stego, dtype=np.float64)
    if sigma == 0:
        return stego.copy()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(stego.shape) * (sigma / 255.0)
    return np.clip(stego + noise, 0.0, 1.0)


# Dropout and field pixel filling


def attack_dropout(stego, ratio: float, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Zero ``round(ratio*H*W)`` random pixel positions across all channels.

    Returns the attacked image and its survival mask (1 kept, 0 dropped).
    """
    if not 0.0 <= ratio <= 1.0:
        raise AttackError(f"dropout ratio must lie in [0, 1], got {ratio}")
    stego = np.asarray(stego, dtype=np.float64)
    h, w = stego.shape[-2:]
    n_drop = int(np.floor(ratio * h * w + 0.5))
    rng = np.random.default_rng(seed)
    mask = np.ones(h * w, dtype=np.float64)
    # prefix of a permutation: with a fixed seed, higher ratios drop supersets
    mask[rng.permutation(h * w)[:n_drop]] = 0.0
    mask = mask.reshape(h, w)
    return stego * mask, mask


def detect_mask(received) -> np.ndarray:
    """1 where any channel is nonzero, 0 where every channel is exactly 0."""
    received = np.asarray(received)
    return np.any(received != 0, axis=-3).astype(np.float64)


class Neighborhood(enum.Enum):
    FOUR = "four"
    NINE = "nine"

    @classmethod
    def parse(cls, value) -> Neighborhood:
        if isinstance(value, cls):
            return value
        aliases = {"4": cls.FOUR, "four": cls.FOUR, "9": cls.NINE, "nine": cls.NINE}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise AttackError(f"unknown neighborhood {value!r}; expected four or nine") from None

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        if self is Neighborhood.FOUR:
            return ((-1, 0), (1, 0), (0, -1), (0, 1))
        return tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # out[..., y, x] = a[..., y+dy, x+dx], zero outside the image
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def _shift_tensor(t: Tensor, dy: int, dx: int) -> Tensor:
    return linear_map(t, lambda a: _shift(a, dy, dx), lambda g: _shift(g, -dy, -dx))


def fill_holes(values, mask, neighborhood=Neighborhood.NINE, passes: int = 3):
    """Replace masked-out pixels by the mean of surviving neighbours.

    ``values`` is ``C x H x W`` (or batched) and must already be zero where
    ``mask`` is 0. Each pass fills every hole with at least one surviving
    neighbour and promotes it to a survivor for the next pass. Accepts an
    array or a tape tensor (the mask is treated as a constant) and returns
    the same kind, plus the final mask.
    """
    neighborhood = Neighborhood.parse(neighborhood)
    if passes < 0:
        raise AttackError("passes must be >= 0")
    on_tape = isinstance(values, Tensor)
    s = values if on_tape else Tensor(np.asarray(values, dtype=np.float64))
    m = np.array(mask, dtype=s.dtype)
    for _ in range(passes):
        holes = m == 0
        if not holes.any():
            break
        s_sum = None
        m_sum = np.zeros_like(m)
        for dy, dx in neighborhood.offsets:
            shifted = _shift_tensor(s, dy, dx)
            s_sum = shifted if s_sum is None else s_sum + shifted
            m_sum = m_sum + _shift(m, dy, dx)
        fillable = holes & (m_sum > 0)
        if not fillable.any():
            break
        avg = s_sum / np.where(m_sum > 0, m_sum, 1.0)
        s = s + avg * fillable.astype(s.dtype)
        m = np.where(fillable, 1.0, m).astype(m.dtype)
    return (s if on_tape else s.data), m


@dataclass
class FillResult:
    encoded: np.ndarray
    mask: np.ndarray
    unfilled: int


def masked_residual(received, cover, mask, mode=HideMode.SUBTRACT) -> np.ndarray:
    """Residual at surviving pixels, 0 at dropped ones."""
    received = np.asarray(received, dtype=np.float64)
    cover = np.asarray(cover, dtype=np.float64)
    if received.shape != cover.shape or received.shape[-2:] != np.shape(mask):
        raise AttackError(f"shape mismatch: received {received.shape}, cover {cover.shape}, mask {np.shape(mask)}")
    kept = cover * mask
    if HideMode.parse(mode) is HideMode.SUBTRACT:
        return kept - received
    return received - kept


def field_fill(received, cover, mask, neighborhood=Neighborhood.NINE, passes: int = 3, mode=HideMode.SUBTRACT) -> FillResult:
    """Extract the residual from a dropout-damaged stego image and fill its holes."""
    s_e = masked_residual(received, cover, mask, mode)
    filled, final_mask = fill_holes(s_e, mask, neighborhood, passes)
    return FillResult(filled, final_mask, int((final_mask == 0).sum()))


# JPEG model

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# JFIF full-range RGB -> YCbCr, applied to 0..255 values with the 128 level shift folded in
RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)


def quality_scale(qf: int) -> float:
    if not (isinstance(qf, (int, np.integer)) and 1 <= qf <= 100):
        raise AttackError(f"JPEG quality factor must be an integer in [1, 100], got {qf!r}")
    return 5000.0 / qf if qf < 50 else 200.0 - 2.0 * qf


def scaled_tables(qf: int) -> tuple[np.ndarray, np.ndarray]:
    """Luma and chroma quantization tables for a quality factor (IJG scaling)."""
    scale = quality_scale(qf)

    def scaled(t):
        return np.clip(np.floor(t * scale / 100.0 + 0.5), 1, 255)

    return scaled(LUMA_TABLE), scaled(CHROMA_TABLE)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


DCT8 = _dct_matrix()


def _blockwise(a: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # apply left @ block @ right to every 8x8 block of the last two axes
    *lead, h, w = a.shape
    blocks = a.reshape(*lead, h // 8, 8, w // 8, 8)
    out = np.einsum("ij,...ajbk,kl->...aibl", left, blocks, right, optimize=True)
    return out.reshape(a.shape)


def _dct(a):
    return _blockwise(a, DCT8, DCT8.T)


def _idct(a):
    return _blockwise(a, DCT8.T, DCT8)


def _color(matrix):
    def fwd(a):
        return np.einsum("ij,...jhw->...ihw", matrix, a)

    def adj(g):
        return np.einsum("ji,...jhw->...ihw", matrix, g)

    return fwd, adj


def _pad_index(n: int) -> np.ndarray:
    padded = -(-n // 8) * 8
    idx = np.arange(padded)
    # reflect without repeating the edge sample
    idx = np.where(idx < n, idx, 2 * (n - 1) - idx)
    return np.abs(idx)


def _jpeg(x: Tensor, qf: int, rounder) -> Tensor:
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise AttackError(f"JPEG model expects RGB (3,H,W) or (N,3,H,W), got {x.shape}")
    luma, chroma = scaled_tables(qf)
    h, w = x.shape[-2:]
    padded = (-(-h // 8) * 8, -(-w // 8) * 8)
    if padded != (h, w):
        rows, cols = _pad_index(h), _pad_index(w)
        x = getitem(x, (Ellipsis, rows[:, None], cols[None, :]))
    ph, pw = padded
    qtab = np.stack([np.tile(luma, (ph // 8, pw // 8))] + [np.tile(chroma, (ph // 8, pw // 8))] * 2)
    qtab = qtab.astype(x.dtype)
    shift = np.array([128.0, 0.0, 0.0], dtype=x.dtype)[:, None, None]

    ycc = linear_map(mul(x, 255.0), *_color(RGB_TO_YCC.astype(x.dtype))) - shift
    coeff = linear_map(ycc, _dct, _idct)
    q = rounder(mul(coeff, 1.0 / qtab))
    rec = linear_map(mul(q, qtab), _idct, _dct)
    rgb = linear_map(rec + shift, *_color(YCC_TO_RGB.astype(x.dtype)))
    out = clip(mul(rgb, 1.0 / 255.0), 0.0, 1.0)
    if padded != (h, w):
        out = getitem(out, (Ellipsis, slice(0, h), slice(0, w)))
    return out


def attack_jpeg(stego, qf: int) -> np.ndarray:
    """JPEG distortion model: 4:4:4 YCbCr, 8x8 DCT, IJG-scaled quantization.

    Entropy coding is lossless and therefore omitted.
    """
    quality_scale(qf)
    x = Tensor(np.asarray(stego, dtype=np.float64))
    return _jpeg(x, qf, lambda t: Tensor(np.rint(t.data))).data


def attack_jpeg_differentiable(stego, qf: int) -> Tensor:
    """Same forward values as :func:`attack_jpeg`; rounding is straight-through for gradients."""
    quality_scale(qf)
    return _jpeg(as_tensor(stego), qf, lambda t: straight_through(t, np.rint))


def apply_attack(stego, spec: AttackSpec, seed=None):
    """Dispatch on ``spec.kind``. Dropout returns ``(attacked, mask)``; the others an image."""
    seed = spec.seed if spec.seed is not None else seed
    if spec.kind == "gaussian":
        return attack_gaussian(stego, spec.sigma, seed)
    if spec.kind == "dropout":
        return attack_dropout(stego, spec.ratio, seed)
    return attack_jpeg(stego, spec.qf)
