"""Wavelet-domain learned-kernel block.

The input is decomposed with a multilevel DWT, the deepest approximation
band is mixed across channels by a weight field that has its own matrix at
every coefficient position, and the result is reconstructed.  A pointwise
convolution of the raw input is added before the ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import DTYPE, Tensor, add, conv2d, parameter, relu
from .wavelet import CoeffPyramid, WaveletFilter, wavedec2, waverec2, wavelet_filters


def channel_mix(x: Tensor, w: Tensor) -> Tensor:
    """Per-position channel mixing: ``out[b,o,i,j] = sum_c w[o,c,i,j] * x[b,c,i,j]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"channel_mix: need 4-d operands, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1] or w.shape[2:] != x.shape[2:]:
        raise DimensionError(f"channel_mix: weights {w.shape} do not fit input {x.shape}")
    xm = x.data.transpose(2, 3, 0, 1)  # (h, w, B, C)
    wm = w.data.transpose(2, 3, 1, 0)  # (h, w, C, O)
    out = np.matmul(xm, wm).transpose(2, 3, 0, 1)

    def _backward(g):
        gm = g.transpose(2, 3, 0, 1)
        gx = np.matmul(gm, wm.transpose(0, 1, 3, 2)).transpose(2, 3, 0, 1) if x.requires_grad else None
        gw = np.matmul(xm.transpose(0, 1, 3, 2), gm).transpose(3, 2, 0, 1) if w.requires_grad else None
        return gx, gw

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), _backward, "channel_mix")


@dataclass
class WnoBlock:
    """Parameters of one wavelet block.

    ``kernel_weights`` has shape (Cout, Cin, H / 2**level, W / 2**level) and
    so fixes the input resolution.  With ``mix_details`` the three level-L
    detail bands get their own weight fields in ``detail_weights``.
    """

    filter: WaveletFilter
    level: int
    kernel_weights: Tensor
    bypass_w: Tensor
    bypass_b: Tensor
    mix_details: bool = False
    detail_weights: tuple[Tensor, Tensor, Tensor] | None = None

    @property
    def in_channels(self) -> int:
        return self.kernel_weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel_weights.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"kernel": self.kernel_weights, "bypass_w": self.bypass_w, "bypass_b": self.bypass_b}
        if self.mix_details:
            for band, w in zip(("lh", "hl", "hh"), self.detail_weights):
                params[f"kernel_{band}"] = w
        return params


def init_wno_block(in_channels: int, out_channels: int, height: int, width: int, wavelet="db4",
                   level: int = 2, rng: np.random.Generator | None = None,
                   mix_details: bool = False) -> WnoBlock:
    """Build a block with uniform ``[0, 1/(Cin*Cout))`` kernel weights and a He-normal bypass."""
    f = wavelet if isinstance(wavelet, WaveletFilter) else wavelet_filters(wavelet)
    if height % 2**level or width % 2**level:
        raise DimensionError(f"{height}x{width} is not divisible by 2**{level}")
    if in_channels != out_channels and not (mix_details and level == 1):
        raise DimensionError("untouched detail bands pass through, so in_channels must equal out_channels")
    rng = rng if rng is not None else np.random.default_rng(0)
    modes = (out_channels, in_channels, height // 2**level, width // 2**level)
    spread = 1.0 / (in_channels * out_channels)

    def kernel():
        return parameter((spread * rng.random(modes)).astype(DTYPE))

    kernel_weights = kernel()
    detail = (kernel(), kernel(), kernel()) if mix_details else None
    bypass_w = parameter(rng.standard_normal((out_channels, in_channels, 1, 1)) * np.sqrt(2.0 / in_channels))
    bypass_b = parameter(np.zeros(out_channels))
    return WnoBlock(f, level, kernel_weights, bypass_w, bypass_b, mix_details, detail)


def wno_forward(x: Tensor, block: WnoBlock, activate: bool = True) -> Tensor:
    """Apply one block to a (B, Cin, H, W) tensor; output is (B, Cout, H, W).

    ``activate=False`` returns the pre-ReLU sum, which is linear in ``x``.
    """
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise DimensionError(f"wno_forward: expected (B, {block.in_channels}, H, W), got {x.shape}")
    H, W = x.shape[2:]
    step = 2**block.level
    if H % step or W % step:
        raise DimensionError(f"wno_forward: {H}x{W} is not divisible by 2**{block.level}")
    modes = block.kernel_weights.shape[2:]
    if (H // step, W // step) != modes:
        raise DimensionError(f"wno_forward: block was built for {modes[0] * step}x{modes[1] * step} inputs, got {H}x{W}")

    p = wavedec2(x, block.filter, block.level)
    details = list(p.details)
    if block.mix_details:
        details[-1] = tuple(channel_mix(band, w) for band, w in zip(details[-1], block.detail_weights))
    mixed = CoeffPyramid(p.levels, channel_mix(p.approx, block.kernel_weights), details)
    out = add(waverec2(mixed, block.filter), conv2d(x, block.bypass_w, block.bypass_b))
    return relu(out) if activate else out
