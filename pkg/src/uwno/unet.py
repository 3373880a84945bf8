"""Compact U-Net encoder/decoder used as the third model branch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import (DTYPE, Tensor, concat_channels, conv2d, max_pool2d, parameter, relu,
                     upsample_nearest2d, zeros)

ConvPair = tuple[Tensor, Tensor, Tensor, Tensor]  # w1, b1, w2, b2


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 16
    out_channels: int = 16

    def __post_init__(self):
        if self.depth < 1 or min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"invalid U-Net config {self}")

    def width(self, level: int) -> int:
        """Feature channels at encoder ``level`` (``depth`` is the bottleneck)."""
        return self.base_channels * 2**level


@dataclass
class UnetParams:
    encoder: list[ConvPair]
    bottleneck: ConvPair
    up: list[tuple[Tensor, Tensor]]
    decoder: list[ConvPair]
    final: tuple[Tensor, Tensor]
    config: UnetConfig = field(default_factory=UnetConfig)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        pair_names = ("w1", "b1", "w2", "b2")
        for l, pair in enumerate(self.encoder):
            out.update({f"enc{l}.{n}": t for n, t in zip(pair_names, pair)})
        out.update({f"bottleneck.{n}": t for n, t in zip(pair_names, self.bottleneck)})
        for l in range(len(self.decoder)):
            out[f"up{l}.w"], out[f"up{l}.b"] = self.up[l]
            out.update({f"dec{l}.{n}": t for n, t in zip(pair_names, self.decoder[l])})
        out["final.w"], out["final.b"] = self.final
        return out


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> tuple[Tensor, Tensor]:
    """He-normal kernel (std sqrt(2 / fan_in)) and zero bias."""
    std = np.sqrt(2.0 / (c_in * k * k))
    w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(DTYPE)
    return parameter(w), parameter(np.zeros(c_out, dtype=DTYPE))


def _pair(rng, c_in, c_out) -> ConvPair:
    return (*he_conv(rng, c_out, c_in, 3), *he_conv(rng, c_out, c_out, 3))


def init_unet(cfg: UnetConfig, rng: np.random.Generator) -> UnetParams:
    encoder = []
    c_in = cfg.in_channels
    for l in range(cfg.depth):
        encoder.append(_pair(rng, c_in, cfg.width(l)))
        c_in = cfg.width(l)
    bottleneck = _pair(rng, c_in, cfg.width(cfg.depth))
    up, decoder = [], []
    for l in range(cfg.depth):
        up.append(he_conv(rng, cfg.width(l), cfg.width(l + 1), 1))
        decoder.append(_pair(rng, 2 * cfg.width(l), cfg.width(l)))
    final = he_conv(rng, cfg.out_channels, cfg.base_channels, 1)
    return UnetParams(encoder, bottleneck, up, decoder, final, cfg)


def double_conv(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two 3x3 same-padded convolutions, each followed by ReLU."""
    for w in (w1, w2):
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise DimensionError(f"double_conv needs 3x3 kernels, got {w.shape}")
    return relu(conv2d(relu(conv2d(x, w1, b1, padding=1)), w2, b2, padding=1))


def unet_forward(x: Tensor, p: UnetParams, cfg: UnetConfig | None = None,
                 skip_connections: bool = True) -> Tensor:
    """Run the encoder/decoder; output has ``cfg.out_channels`` and the input's spatial size.

    ``skip_connections=False`` feeds zeros in place of the encoder
    activations (same channel count), for ablation checks.
    """
    cfg = cfg or p.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"unet_forward: expected (B, {cfg.in_channels}, H, W), got {x.shape}")
    H, W = x.shape[2:]
    if H % 2**cfg.depth or W % 2**cfg.depth:
        raise DimensionError(f"unet_forward: {H}x{W} is not divisible by 2**{cfg.depth}")

    skips = []
    h = x
    for pair in p.encoder:
        h = double_conv(h, *pair)
        skips.append(h)
        h = max_pool2d(h)
    h = double_conv(h, *p.bottleneck)
    for l in reversed(range(cfg.depth)):
        w, b = p.up[l]
        # a 1x1 conv commutes with nearest upsampling; convolving first is 4x cheaper
        h = upsample_nearest2d(conv2d(h, w, b))
        skip = skips[l] if skip_connections else zeros(skips[l].shape)
        h = double_conv(concat_channels(skip, h), *p.decoder[l])
    return conv2d(h, *p.final)
