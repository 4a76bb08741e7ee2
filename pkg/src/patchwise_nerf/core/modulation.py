"""
Patch-aware convolution modulation.

A hypernetwork maps the patch parameters (s, offset_x, offset_y) to one gain
vector per convolution layer, sigma_l = tanh(W_l p + b_l) + 1 in (0, 2),
where p is the output of a small MLP over a Fourier encoding of the patch
parameters. The gains can scale the kernel's output channels (weight
modulation) or the convolution output (output modulation); both give the
same result up to rounding, with the bias added after modulation in both.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractViolation, InputError
from ..utils.data_manager import DataManager

logger = logging.getLogger(__name__)

DEFAULT_FOURIER_FREQS = 8
DEFAULT_HIDDEN_DIM = 512
LEAKY_SLOPE = 0.2
ADAPTER_INITS = ("identity", "random")

ON = "always-on"
OFF = "always-off"
VARYING = "varying"


def encoding_dim(fourier_freqs: int) -> int:
    return 3 * (2 * fourier_freqs + 1)


def encode_patch_params(s, offset_x, offset_y, fourier_freqs: int = DEFAULT_FOURIER_FREQS) -> np.ndarray:
    """
    Fourier features of (s, offset_x, offset_y). For each scalar v the block
    is sin(2^k pi v) for k < L, then cos(2^k pi v), then v itself.
    """
    values = np.stack(np.broadcast_arrays(s, offset_x, offset_y), axis=-1).astype(np.float64)
    angles = values[..., None] * (np.pi * 2.0 ** np.arange(fourier_freqs))
    blocks = np.concatenate([np.sin(angles), np.cos(angles), values[..., None]], axis=-1)
    return blocks.reshape(values.shape[:-1] + (encoding_dim(fourier_freqs),))


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


@dataclass
class ConvLayerSpec:
    """A conv layer: kernel (c_out, c_in, k, k), optional bias, stride, padding (default k // 2)."""

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ContractViolation(f"kernel must be (c_out, c_in, k, k), got {self.kernel.shape}")
        if self.kernel.shape[2] % 2 == 0:
            raise ContractViolation("kernel size must be odd")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ContractViolation(f"bias must have shape ({self.c_out},)")
        if self.stride < 1:
            raise ContractViolation("stride must be >= 1")
        if not np.all(np.isfinite(self.kernel)):
            raise ContractViolation("kernel weights must be finite")
        if self.padding is None:
            self.padding = self.kernel.shape[2] // 2

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    @classmethod
    def random(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        kernel = (rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k)).astype(dtype)
        b = rng.standard_normal(c_out).astype(dtype) if bias else None
        return cls(kernel=kernel, bias=b)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of (c_in, H, W) or (B, c_in, H, W) input with a (c_out, c_in, k, k) kernel."""
    x = np.asarray(x)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise InputError(f"expected (c_in, H, W) or (B, c_in, H, W) input, got {x.shape}")
    if not batched:
        x = x[None]
    if x.shape[1] != kernel.shape[1]:
        raise InputError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < k or xp.shape[3] < k:
        raise InputError(f"input {x.shape[2:]} is smaller than the {k}x{k} kernel")
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("bihwkl,oikl->bohw", windows, kernel)
    return y if batched else y[0]


def _check_gains(layer: ConvLayerSpec, sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma)
    if sigma.shape != (layer.c_out,):
        raise InputError(f"need {layer.c_out} gains, got shape {sigma.shape}")
    return sigma


def _add_bias(y: np.ndarray, layer: ConvLayerSpec) -> np.ndarray:
    if layer.bias is None:
        return y
    return y + layer.bias[:, None, None]


def conv_weight_modulated(layer: ConvLayerSpec, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """y = conv2d(W * sigma, x) + b, sigma scaling the output channels of W."""
    sigma = _check_gains(layer, sigma)
    kernel = layer.kernel * sigma[:, None, None, None].astype(layer.kernel.dtype)
    return _add_bias(conv2d(x, kernel, layer.stride, layer.padding), layer)


def conv_output_modulated(layer: ConvLayerSpec, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """y = sigma * conv2d(W, x) + b."""
    sigma = _check_gains(layer, sigma).astype(layer.kernel.dtype)
    y = conv2d(x, layer.kernel, layer.stride, layer.padding)
    return _add_bias(sigma[:, None, None] * y, layer)


@dataclass
class ModulationNet:
    """
    Hypernetwork H: (s, offset_x, offset_y) -> (sigma_1, ..., sigma_L).

    body: two (W, b) linear layers with LeakyReLU(0.2), encoding -> d_p -> d_p.
    adapters: one (W, b) per modulated layer, d_p -> c_out of that layer.
    """

    fourier_freqs: int
    body: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    adapters: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if len(self.body) != 2:
            raise ContractViolation("the hypernetwork body has exactly two layers")
        if self.body[0][0].shape[0] != encoding_dim(self.fourier_freqs):
            raise ContractViolation("body input size does not match the Fourier encoding")
        for w, b in self.adapters:
            if w.shape[0] != self.hidden_dim or b.shape != (w.shape[1],):
                raise ContractViolation("adapter shapes must be (d_p, c_out) and (c_out,)")

    @property
    def hidden_dim(self) -> int:
        return self.body[-1][0].shape[1]

    @property
    def layer_channels(self) -> List[int]:
        return [w.shape[1] for w, _ in self.adapters]

    @classmethod
    def initialize(
        cls,
        layer_channels: Sequence[int],
        fourier_freqs: int = DEFAULT_FOURIER_FREQS,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        adapter_init: str = "identity",
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ) -> "ModulationNet":
        if adapter_init not in ADAPTER_INITS:
            raise ContractViolation(f"adapter_init must be one of {ADAPTER_INITS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))

        def linear(fan_in, fan_out, scale):
            w = (rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in)).astype(dtype)
            return w, np.zeros(fan_out, dtype=dtype)

        dims = [encoding_dim(fourier_freqs), hidden_dim, hidden_dim]
        body = tuple(linear(a, b, gain) for a, b in zip(dims[:-1], dims[1:]))
        if adapter_init == "identity":
            adapters = tuple(
                (np.zeros((hidden_dim, c), dtype=dtype), np.zeros(c, dtype=dtype)) for c in layer_channels
            )
        else:
            adapters = tuple(linear(hidden_dim, c, 1.0) for c in layer_channels)
        return cls(fourier_freqs=fourier_freqs, body=body, adapters=adapters)

    def embed(self, s, offset_x, offset_y) -> np.ndarray:
        h = encode_patch_params(s, offset_x, offset_y, self.fourier_freqs).astype(self.body[0][0].dtype)
        for w, b in self.body:
            h = leaky_relu(h @ w + b)
        return h


def hyper_forward(net: ModulationNet, s, offset_x, offset_y) -> List[np.ndarray]:
    """Per-layer gains tanh(W_l p + b_l) + 1, kept strictly inside (0, 2)."""
    p = net.embed(s, offset_x, offset_y)
    gains = []
    for w, b in net.adapters:
        g = np.tanh(p @ w + b) + 1.0
        # tanh rounds to +-1 for large inputs; keep the open interval.
        lo = np.finfo(g.dtype).tiny
        hi = np.nextafter(g.dtype.type(2), g.dtype.type(0))
        gains.append(np.clip(g, lo, hi))
    return gains


def modulation_profile(
    net: ModulationNet,
    scale_grid: np.ndarray,
    layers: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """
    Gains over a grid of scales for centered patches (offsets (1 - s) / 2).
    One row per scale, one column per filter named `l<layer>_f<filter>`.
    """
    scale_grid = np.asarray(scale_grid, dtype=np.float64)
    layers = list(range(len(net.adapters))) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer < len(net.adapters):
            raise ContractViolation(f"layer index {layer} out of range")
    offsets = (1.0 - scale_grid) / 2.0
    gains = hyper_forward(net, scale_grid, offsets, offsets)
    frame = pd.DataFrame({"s": scale_grid})
    columns = {
        f"l{layer}_f{c}": gains[layer][:, c]
        for layer in layers
        for c in range(gains[layer].shape[1])
    }
    return pd.concat([frame, pd.DataFrame(columns)], axis=1)


def dump_modulation_profile(
    net: ModulationNet,
    scale_grid: np.ndarray,
    layers: Optional[Sequence[int]],
    path: str,
) -> pd.DataFrame:
    frame = modulation_profile(net, scale_grid, layers)
    DataManager.write_csv(frame, path)
    return frame


def classify_filters(gains: np.ndarray, threshold: float = 0.5) -> Dict[str, int]:
    """
    Sort the filters (columns) of a scales x filters gain matrix into
    scale-dependent ones (range >= threshold) and ones that stay on
    (mean >= 1) or off (mean < 1).
    """
    gains = np.asarray(gains)
    if gains.ndim != 2:
        raise InputError("expected a scales x filters matrix")
    spread = gains.max(axis=0) - gains.min(axis=0)
    varying = spread >= threshold
    mean = gains.mean(axis=0)
    return {
        VARYING: int(np.sum(varying)),
        ON: int(np.sum(~varying & (mean >= 1.0))),
        OFF: int(np.sum(~varying & (mean < 1.0))),
    }


def equivalence_sweep(
    channels: Sequence[int] = (1, 3, 16),
    kernel_sizes: Sequence[int] = (1, 3),
    dtype=np.float32,
    size: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> pd.DataFrame:
    """Max-abs difference between weight and output modulation over a grid of layer shapes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for c_in in channels:
        for c_out in channels:
            for k in kernel_sizes:
                layer = ConvLayerSpec.random(c_in, c_out, k, rng, dtype)
                x = rng.standard_normal((c_in, size, size)).astype(dtype)
                sigma = rng.uniform(0.0, 2.0, c_out).astype(dtype)
                delta = np.max(
                    np.abs(conv_weight_modulated(layer, x, sigma) - conv_output_modulated(layer, x, sigma))
                )
                rows.append({"c_in": c_in, "c_out": c_out, "k": k, "max_abs_delta": float(delta)})
    frame = pd.DataFrame(rows)
    logger.debug("Equivalence sweep (%s): worst delta %.3g", np.dtype(dtype).name, frame["max_abs_delta"].max())
    return frame
