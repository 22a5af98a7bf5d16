"""3x3 convolutions and the densely connected blocks built from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NumericsError, Tensor, _make, as_tensor, concat, leaky_relu

ACTIVATIONS = ("leaky_relu", "none")
LEAKY_SLOPE = 0.2


@dataclass
class ConvLayer:
    """Weights of one 3x3, stride-1, pad-1 convolution."""

    kernel: Tensor
    bias: Tensor
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise NumericsError(f"kernel must be (out, in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise NumericsError("bias length must equal out_ch")
        if self.activation not in ACTIVATIONS:
            raise NumericsError(f"unknown activation {self.activation!r}")

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @classmethod
    def init(
        cls,
        in_ch: int,
        out_ch: int,
        rng: np.random.Generator,
        activation: str = "leaky_relu",
        zero: bool = False,
        scale: float = 1.0,
        dtype=np.float64,
    ) -> ConvLayer:
        """He-style uniform init by fan-in; ``zero`` gives an all-zero layer."""
        shape = (out_ch, in_ch, 3, 3)
        if zero:
            kernel = np.zeros(shape, dtype=dtype)
        else:
            bound = scale * np.sqrt(6.0 / (in_ch * 9))
            kernel = rng.uniform(-bound, bound, size=shape).astype(dtype)
        bias = np.zeros(out_ch, dtype=dtype)
        return cls(Tensor(kernel, requires_grad=True), Tensor(bias, requires_grad=True), activation)

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # x: (N, C, H, W); returns output and the padded input kept for backward
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    # (N, C*9, H*W) column matrix, one GEMM against (O, C*9)
    cols = np.empty((n, c, 3, 3, h, wd), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + wd]
    cols = cols.reshape(n, c * 9, h * wd)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    out += b[None, :, None]
    return out.reshape(n, w.shape[0], h, wd), cols


def _conv_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    n, c, h, wd = x_shape
    o = w.shape[0]
    g2 = g.reshape(n, o, h * wd)
    grad_w = np.einsum("noq,nkq->ok", g2, cols, optimize=True).reshape(w.shape)
    grad_b = g2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, g2).reshape(n, c, 3, 3, h, wd)
    gxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
    for i in range(3):
        for j in range(3):
            gxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
    return gxp[:, :, 1:-1, 1:-1], grad_w, grad_b


def conv2d(x, layer: ConvLayer) -> Tensor:
    """Zero-padded 3x3 convolution followed by the layer's activation.

    Accepts ``(C, H, W)`` or batched ``(N, C, H, W)`` input; spatial size is
    preserved.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise NumericsError(f"conv2d expects a (C,H,W) or (N,C,H,W) tensor, got {x.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.shape[1] != layer.in_ch:
        raise NumericsError(f"conv2d: input has {xd.shape[1]} channels, layer expects {layer.in_ch}")
    w, b = layer.kernel.data, layer.bias.data
    out, cols = _conv_forward(xd, w, b)

    def backward_fn(g):
        g4 = g[None] if unbatched else g
        gx, gw, gb = _conv_backward(g4, cols, w, xd.shape)
        if not x.requires_grad:
            gx = None
        elif unbatched:
            gx = gx[0]
        return gx, gw, gb

    y = _make(out[0] if unbatched else out, (x, layer.kernel, layer.bias), backward_fn)
    if layer.activation == "leaky_relu":
        y = leaky_relu(y, LEAKY_SLOPE)
    return y


@dataclass
class DenseBlock:
    """Densely connected conv stack: layer k sees the input and every earlier output."""

    layers: list[ConvLayer] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) < 2:
            raise NumericsError("a dense block needs at least 2 layers")
        in_ch = self.layers[0].in_ch
        seen = in_ch
        for k, layer in enumerate(self.layers):
            if layer.in_ch != seen:
                raise NumericsError(
                    f"dense block layer {k} takes {layer.in_ch} channels, wiring provides {seen}"
                )
            seen += layer.out_ch

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch

    @classmethod
    def init(
        cls,
        in_ch: int,
        out_ch: int,
        rng: np.random.Generator,
        n_layers: int = 5,
        growth: int = 32,
        zero_final: bool = True,
        final_scale: float = 1.0,
        dtype=np.float64,
    ) -> DenseBlock:
        layers = []
        ch = in_ch
        for _ in range(n_layers - 1):
            layers.append(ConvLayer.init(ch, growth, rng, dtype=dtype))
            ch += growth
        layers.append(
            ConvLayer.init(ch, out_ch, rng, activation="none", zero=zero_final, scale=final_scale, dtype=dtype)
        )
        return cls(layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x) -> Tensor:
        return dense_block(x, self.layers)


def dense_block(x, layers: Sequence[ConvLayer]) -> Tensor:
    x = as_tensor(x)
    if len(layers) < 2:
        raise NumericsError("a dense block needs at least 2 layers")
    axis = 0 if x.ndim == 3 else 1
    features = [x]
    for k, layer in enumerate(layers):
        inp = features[0] if k == 0 else concat(features, axis=axis)
        if inp.shape[axis] != layer.in_ch:
            raise NumericsError(
                f"dense block layer {k} takes {layer.in_ch} channels, wiring provides {inp.shape[axis]}"
            )
        out = conv2d(inp, layer)
        if k < len(layers) - 1:
            features.append(out)
    return out
