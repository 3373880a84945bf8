"""The full U-WNO segmentation network.

A 1x1 lifting convolution feeds three parallel branches with the same
input: a stack of wavelet blocks, a shape-preserving two-layer ConvNet and
a U-Net.  Their outputs are summed and a small convolutional head maps the
sum to one channel of logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, conv2d, no_grad, relu, sigmoid
from .unet import UnetConfig, UnetParams, he_conv, init_unet, unet_forward
from .wavelet import WAVELETS
from .wno import WnoBlock, init_wno_block, wno_forward


@dataclass(frozen=True)
class UwnoConfig:
    channels: int = 16
    wno_blocks: int = 2
    wavelet: str = "db4"
    level: int = 2
    unet_depth: int = 3
    height: int = 128
    width: int = 128
    seed: int = 0
    mix_details: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.wno_blocks < 1 or self.level < 1 or self.unet_depth < 1:
            raise ValueError(f"channels, wno_blocks, level and unet_depth must be >= 1: {self}")
        if self.wavelet not in WAVELETS:
            raise ValueError(f"unknown wavelet {self.wavelet!r}; choose from {', '.join(WAVELETS)}")
        step = 2 ** max(self.level, self.unet_depth)
        if self.height % step or self.width % step:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by {step}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def unet(self) -> UnetConfig:
        c = self.channels
        return UnetConfig(depth=self.unet_depth, base_channels=c, in_channels=c, out_channels=c)


@dataclass
class UwnoParams:
    config: UwnoConfig
    lift: tuple[Tensor, Tensor]
    wno: list[WnoBlock]
    convnet: tuple[Tensor, Tensor, Tensor, Tensor]
    unet: UnetParams
    head: tuple[Tensor, Tensor, Tensor, Tensor]

    def named_parameters(self) -> dict[str, Tensor]:
        """All trainable tensors under stable dotted names, in construction order."""
        out = {"lift.w": self.lift[0], "lift.b": self.lift[1]}
        for i, block in enumerate(self.wno):
            out.update({f"wno{i}.{k}": t for k, t in block.named_parameters().items()})
        out.update({f"convnet.{k}": t for k, t in zip(("w1", "b1", "w2", "b2"), self.convnet)})
        out.update({f"unet.{k}": t for k, t in self.unet.named_parameters().items()})
        out.update({f"head.{k}": t for k, t in zip(("w1", "b1", "w2", "b2"), self.head)})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def init_params(cfg: UwnoConfig) -> UwnoParams:
    """Initialise every tensor from one PCG64 stream seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    lift = he_conv(rng, c, 1, 1)
    blocks = [init_wno_block(c, c, cfg.height, cfg.width, cfg.wavelet, cfg.level, rng, cfg.mix_details)
              for _ in range(cfg.wno_blocks)]
    convnet = (*he_conv(rng, c, c, 3), *he_conv(rng, c, c, 3))
    unet = init_unet(cfg.unet, rng)
    head = (*he_conv(rng, c, c, 3), *he_conv(rng, 1, c, 1))
    return UwnoParams(cfg, lift, blocks, convnet, unet, head)


def branches(image: Tensor, p: UwnoParams) -> tuple[Tensor, Tensor, Tensor]:
    """The three post-ReLU branch outputs ``(wno, convnet, unet)`` that fusion sums."""
    cfg = p.config
    if image.ndim != 4 or image.shape[1] != 1:
        raise DimensionError(f"expected a (B, 1, H, W) image batch, got {image.shape}")
    if image.shape[2:] != (cfg.height, cfg.width):
        raise DimensionError(f"model was built for {cfg.height}x{cfg.width} images, got {image.shape[2]}x{image.shape[3]}")
    z = conv2d(image, *p.lift)
    x1 = z
    for block in p.wno:
        x1 = wno_forward(x1, block)
    w1, b1, w2, b2 = p.convnet
    x2 = relu(conv2d(relu(conv2d(z, w1, b1, padding=1)), w2, b2, padding=1))
    # the U-Net ends in a linear 1x1 conv; activating it makes all three
    # summands post-activation like the other two branches
    x3 = relu(unet_forward(z, p.unet, cfg.unet))
    return x1, x2, x3


def head_forward(fused: Tensor, p: UwnoParams) -> Tensor:
    w1, b1, w2, b2 = p.head
    return conv2d(relu(conv2d(fused, w1, b1, padding=1)), w2, b2)


def uwno_forward(image: Tensor, p: UwnoParams) -> Tensor:
    """Logits of shape (B, 1, H, W) for a (B, 1, H, W) batch of images in [0, 1]."""
    x1, x2, x3 = branches(image, p)
    return head_forward(x1 + x2 + x3, p)


def predict_mask(image: Tensor, p: UwnoParams) -> Tensor:
    """Binary mask: 1 where ``sigmoid(logits) >= 0.5``."""
    with no_grad():
        probs = sigmoid(uwno_forward(image, p))
    return Tensor((probs.data >= 0.5).astype(np.float32))
