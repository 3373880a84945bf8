"""Image/mask ingestion, dataset splitting and a synthetic ultrasound-like generator.

A dataset directory holds ``images/<stem>.png`` and ``masks/<stem>.png``
with identical stems.  Images are scaled to [0, 1] and resized bilinearly;
masks are resized with nearest-neighbour sampling and thresholded at 127.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ContractError, IngestionError
from .tensor import Tensor

MASK_THRESHOLD = 127


@dataclass
class Sample:
    """One image (1, H, W) in [0, 1] with its binary mask of the same shape."""

    image: Tensor
    mask: Tensor
    id: str


def _read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.getchannel(0), dtype=np.float64)
            elif im.mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).mean(axis=2)
            else:
                raise IngestionError(f"{path}: unsupported PNG mode {im.mode!r}, expected 8-bit gray or RGB")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, IngestionError):
            raise
        raise IngestionError(f"cannot decode {path}: {exc}") from exc
    if arr.size == 0:
        raise IngestionError(f"{path}: image has zero size")
    return arr


def _resize(arr: np.ndarray, target: int, resample) -> np.ndarray:
    if arr.shape == (target, target):
        return arr
    im = Image.fromarray(arr.astype(np.float32))
    return np.asarray(im.resize((target, target), resample=resample), dtype=np.float64)


def load_image(path, target: int) -> Tensor:
    """Read a PNG as a (1, target, target) tensor in [0, 1]."""
    arr = _read_gray(path) / 255.0
    arr = np.clip(_resize(arr, target, Image.BILINEAR), 0.0, 1.0)
    return Tensor(arr[None])


def load_mask(path, target: int) -> Tensor:
    arr = _resize(_read_gray(path), target, Image.NEAREST)
    return Tensor((arr > MASK_THRESHOLD)[None])


def load_sample(image_path, mask_path, target: int = 128) -> Sample:
    return Sample(load_image(image_path, target), load_mask(mask_path, target), Path(image_path).stem)


def load_dataset(data_dir, target: int = 128) -> list[Sample]:
    """Load every ``images/*.png`` with its mask, sorted by file stem."""
    data_dir = Path(data_dir)
    image_dir, mask_dir = data_dir / "images", data_dir / "masks"
    if not image_dir.is_dir():
        raise IngestionError(f"missing image directory {image_dir}")
    stems = sorted(p.stem for p in image_dir.glob("*.png"))
    samples = []
    for stem in stems:
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.is_file():
            raise IngestionError(f"no mask for image {stem!r}: expected {mask_path}")
        samples.append(load_sample(image_dir / f"{stem}.png", mask_path, target))
    return samples


def split_dataset(samples: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then the first ``floor(n * val_fraction)`` items form the validation set."""
    if not 0 <= val_fraction < 1:
        raise ContractError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = math.floor(len(samples) * val_fraction)
    return [samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]]


def stack(samples: list[Sample]) -> tuple[Tensor, Tensor]:
    """Batch samples into (B, 1, H, W) image and mask tensors."""
    return (Tensor(np.stack([s.image.data for s in samples])),
            Tensor(np.stack([s.mask.data for s in samples])))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    semi_a: float
    semi_b: float
    angle: float

    def inside(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        dy, dx = rows - self.cy, cols - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.semi_a
        v = (-dx * s + dy * c) / self.semi_b
        return u * u + v * v <= 1.0


def synth_ellipse(rng: np.random.Generator, size: int) -> Ellipse:
    cy, cx = rng.uniform(size / 4, 3 * size / 4, 2)
    a, b = rng.uniform(size / 8, size / 3, 2)
    return Ellipse(float(cy), float(cx), float(a), float(b), float(rng.uniform(0, math.pi)))


def synth_params(seed: int, size: int = 128) -> Ellipse:
    """The ellipse that :func:`synth_sample` draws for ``seed``."""
    return synth_ellipse(np.random.default_rng(seed), size)


def synth_sample(seed: int, size: int = 128) -> Sample:
    """A speckled bright ellipse on a dark background and its filled mask."""
    if size <= 0 or size % 8:
        raise ContractError(f"synthetic image size must be a positive multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    ellipse = synth_ellipse(rng, size)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = ellipse.inside(rows, cols)
    rim = mask & ~ndimage.binary_erosion(mask, iterations=2, border_value=1)
    image = np.full((size, size), 0.1)
    image[mask] = 0.5
    image[rim] = 0.8
    image = ndimage.uniform_filter(image, size=3, mode="nearest")
    image = np.clip(image * rng.uniform(0.6, 1.4, (size, size)), 0.0, 1.0)
    return Sample(Tensor(image[None]), Tensor(mask[None]), f"synth_{seed}")


def write_png(path, arr: np.ndarray) -> None:
    """Write a 2D array in [0, 1] as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(img).save(tmp, format="PNG")
    os.replace(tmp, path)


def export_synth(out_dir, n: int, seed: int = 0, size: int = 128) -> list[str]:
    """Write ``n`` synthetic pairs (seeds ``seed .. seed+n-1``); returns their stems."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    stems = []
    for s in range(seed, seed + n):
        sample = synth_sample(s, size)
        write_png(out_dir / "images" / f"{sample.id}.png", sample.image.data[0])
        write_png(out_dir / "masks" / f"{sample.id}.png", sample.mask.data[0])
        stems.append(sample.id)
    return stems
