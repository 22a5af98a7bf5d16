"""Affine coupling blocks operating on 12-channel Haar subband tensors.

One block maps ``(u1, u2) -> (u1', u2')`` with::

    u1' = phi(u2) + u1
    u2' = u2 * exp(g(rho(u1'))) + theta(u1')

where ``g`` is a scaled sigmoid. The inverse recovers ``u2`` first (``u1'`` is
known) and then ``u1``, so the map is invertible for any subnet weights. The
hide and reveal directions run the same :class:`CouplingStack` object.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import serialize
from .numerics.conv import ConvLayer, DenseBlock
from .numerics.tensor import NumericsError, Tensor, as_tensor, concat, exp, getitem, mul, sigmoid, sub
from .wavelet import LAYOUT_VERSION

SUBBAND_CHANNELS = 12
SPLIT = 6
SIGMA_VARIANTS = ("centered", "plain")


class ConfigurationError(NumericsError):
    pass


def scaled_sigmoid(x, k: float, variant: str = "centered") -> Tensor:
    """``k * (sigmoid(x) - 0.5)`` (centered) or ``k * sigmoid(x)`` (plain)."""
    s = sigmoid(x)
    if variant == "centered":
        s = sub(s, 0.5)
    elif variant != "plain":
        raise ConfigurationError(f"unknown sigma variant {variant!r}")
    return mul(s, k)


@dataclass
class CouplingBlockParams:
    phi: DenseBlock
    rho: DenseBlock
    theta: DenseBlock
    clamp_k: float = 2.0
    sigma_variant: str = "centered"

    def __post_init__(self):
        if self.clamp_k <= 0:
            raise ConfigurationError("clamp_k must be positive")
        if self.sigma_variant not in SIGMA_VARIANTS:
            raise ConfigurationError(f"unknown sigma variant {self.sigma_variant!r}")
        for name in ("phi", "rho", "theta"):
            net = getattr(self, name)
            if net.in_ch != SPLIT or net.out_ch != SPLIT:
                raise ConfigurationError(f"{name} must map {SPLIT} channels to {SPLIT}, got {net.in_ch}->{net.out_ch}")

    def subnets(self) -> dict[str, DenseBlock]:
        return {"phi": self.phi, "rho": self.rho, "theta": self.theta}

    def parameters(self) -> list[Tensor]:
        return self.phi.parameters() + self.rho.parameters() + self.theta.parameters()

    def log_scale(self, u1_new) -> Tensor:
        return scaled_sigmoid(self.rho(u1_new), self.clamp_k, self.sigma_variant)


def _check_halves(u1: Tensor, u2: Tensor) -> int:
    if u1.shape != u2.shape:
        raise ConfigurationError(f"coupling halves differ in shape: {u1.shape} vs {u2.shape}")
    if u1.ndim not in (3, 4):
        raise ConfigurationError(f"coupling halves must be (6,h,w) or (N,6,h,w), got {u1.shape}")
    axis = u1.ndim - 3
    if u1.shape[axis] != SPLIT:
        raise ConfigurationError(f"coupling halves need {SPLIT} channels, got {u1.shape[axis]}")
    return axis


def block_forward(u1, u2, p: CouplingBlockParams) -> tuple[Tensor, Tensor]:
    u1, u2 = as_tensor(u1), as_tensor(u2)
    _check_halves(u1, u2)
    u1_new = p.phi(u2) + u1
    u2_new = u2 * exp(p.log_scale(u1_new)) + p.theta(u1_new)
    return u1_new, u2_new


def block_inverse(u1_new, u2_new, p: CouplingBlockParams) -> tuple[Tensor, Tensor]:
    u1_new, u2_new = as_tensor(u1_new), as_tensor(u2_new)
    _check_halves(u1_new, u2_new)
    # u2 must come back first: u1' is what conditions rho and theta
    u2 = (u2_new - p.theta(u1_new)) / exp(p.log_scale(u1_new))
    u1 = u1_new - p.phi(u2)
    return u1, u2


@dataclass
class CouplingStack:
    blocks: list[CouplingBlockParams] = field(default_factory=list)
    split_point: int = SPLIT

    @classmethod
    def init(
        cls,
        n_blocks: int = 16,
        seed: int = 0,
        clamp_k: float = 2.0,
        sigma_variant: str = "centered",
        n_layers: int = 5,
        growth: int = 32,
        zero_final: bool = True,
        final_scale: float = 1.0,
        dtype=np.float64,
    ) -> CouplingStack:
        """Fresh stack. ``zero_final=True`` makes it an exact identity map."""
        rng = np.random.default_rng(seed)

        def net():
            return DenseBlock.init(
                SPLIT, SPLIT, rng, n_layers=n_layers, growth=growth,
                zero_final=zero_final, final_scale=final_scale, dtype=dtype,
            )

        blocks = [
            CouplingBlockParams(net(), net(), net(), clamp_k=clamp_k, sigma_variant=sigma_variant)
            for _ in range(n_blocks)
        ]
        return cls(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    @property
    def geometry(self) -> dict:
        if not self.blocks:
            return {"n_layers": 0, "growth": 0}
        layers = self.blocks[0].phi.layers
        return {"n_layers": len(layers), "growth": layers[0].out_ch}

    @property
    def dtype(self):
        return self.blocks[0].phi.layers[0].kernel.dtype if self.blocks else np.dtype(np.float64)

    def astype(self, dtype) -> CouplingStack:
        """Copy with every parameter cast to ``dtype``."""
        arrays, meta = self.to_arrays()
        return CouplingStack.from_arrays({k: v.astype(dtype) for k, v in arrays.items()}, meta)

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            for name, net in block.subnets().items():
                for j, layer in enumerate(net.layers):
                    arrays[f"block{i:03d}.{name}.layer{j}.kernel"] = layer.kernel.data
                    arrays[f"block{i:03d}.{name}.layer{j}.bias"] = layer.bias.data
        meta = {
            "kind": "fiih-coupling-stack",
            "n_blocks": len(self.blocks),
            "clamp_k": [b.clamp_k for b in self.blocks],
            "sigma_variant": [b.sigma_variant for b in self.blocks],
            "split_point": self.split_point,
            "wavelet_layout": LAYOUT_VERSION,
            **self.geometry,
        }
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> CouplingStack:
        if meta.get("kind") != "fiih-coupling-stack":
            raise ConfigurationError("container does not hold a coupling stack")
        if meta.get("wavelet_layout") != LAYOUT_VERSION:
            raise ConfigurationError(f"model expects wavelet layout {meta.get('wavelet_layout')!r}")
        blocks = []
        for i in range(meta["n_blocks"]):
            nets = {}
            for name in ("phi", "rho", "theta"):
                layers = []
                for j in range(meta["n_layers"]):
                    key = f"block{i:03d}.{name}.layer{j}"
                    activation = "none" if j == meta["n_layers"] - 1 else "leaky_relu"
                    layers.append(
                        ConvLayer(
                            Tensor(arrays[key + ".kernel"].copy(), requires_grad=True),
                            Tensor(arrays[key + ".bias"].copy(), requires_grad=True),
                            activation,
                        )
                    )
                nets[name] = DenseBlock(layers)
            blocks.append(
                CouplingBlockParams(
                    **nets, clamp_k=float(meta["clamp_k"][i]), sigma_variant=meta["sigma_variant"][i]
                )
            )
        return cls(blocks, split_point=meta.get("split_point", SPLIT))

    def save(self, path: str | Path) -> None:
        arrays, meta = self.to_arrays()
        serialize.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> CouplingStack:
        arrays, meta = serialize.load(path)
        return cls.from_arrays(arrays, meta)

    def digest(self) -> str:
        """SHA-256 of the serialized parameters."""
        arrays, meta = self.to_arrays()
        return hashlib.sha256(serialize.dumps(arrays, meta)).hexdigest()


def _split(x: Tensor) -> tuple[Tensor, Tensor, int]:
    if x.ndim not in (3, 4):
        raise ConfigurationError(f"subband tensor must be (12,h,w) or (N,12,h,w), got {x.shape}")
    axis = x.ndim - 3
    if x.shape[axis] != SUBBAND_CHANNELS:
        raise ConfigurationError(f"coupling stack needs {SUBBAND_CHANNELS} subband channels, got {x.shape[axis]}")
    lead = (slice(None),) * axis
    return getitem(x, lead + (slice(0, SPLIT),)), getitem(x, lead + (slice(SPLIT, None),)), axis


def stack_forward(x_secret, stack: CouplingStack) -> Tensor:
    """Encode secret subbands into ``s_e``; blocks applied first to last."""
    x = as_tensor(x_secret)
    u1, u2, axis = _split(x)
    for block in stack.blocks:
        u1, u2 = block_forward(u1, u2, block)
    return concat([u1, u2], axis=axis)


def stack_inverse(s_e, stack: CouplingStack) -> Tensor:
    """Decode ``s_e`` back into secret subbands; blocks applied last to first."""
    s = as_tensor(s_e)
    u1, u2, axis = _split(s)
    for block in reversed(stack.blocks):
        u1, u2 = block_inverse(u1, u2, block)
    return concat([u1, u2], axis=axis)
