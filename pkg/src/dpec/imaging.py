"""PNG I/O, 8-bit <-> unit-range tensor conversion, PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import IoError, ShapeMismatch, UnsupportedFormat
from .losses import ssim_map
from .tensor import Tensor

PSNR_CAP = 99.0  # reported for identical images, where the ratio diverges


@dataclass
class ImageRGB8:
    """Interleaved 8-bit RGB; pixels is an [H, W, 3] uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ShapeMismatch(
                f"pixel buffer {self.pixels.shape} vs {self.height}x{self.width}"
            )
        if self.pixels.dtype != np.uint8:
            raise UnsupportedFormat("ImageRGB8 requires uint8 samples")


def load_png(path) -> ImageRGB8:
    """Read an 8-bit RGB/RGBA/gray/palette PNG; alpha is dropped."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise UnsupportedFormat(f"{path}: 16/32-bit images are not supported")
    if img.mode not in ("RGB", "RGBA", "L", "LA", "P"):
        raise UnsupportedFormat(f"{path}: mode {img.mode} is not supported")
    rgb = img.convert("RGB")
    arr = np.asarray(rgb, dtype=np.uint8)
    return ImageRGB8(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def save_png(path, image: ImageRGB8) -> None:
    try:
        Image.fromarray(image.pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def to_tensor(image: ImageRGB8) -> Tensor:
    """[1, 3, H, W] float32 in [0, 1]."""
    arr = image.pixels.astype(np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def from_tensor(t: Tensor) -> ImageRGB8:
    """Round-half-up quantization of a [1, 3, H, W] tensor in [0, 1]."""
    if t.data.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeMismatch(f"expected [1,3,H,W], got {t.shape}")
    clipped = np.clip(t.data[0], 0.0, 1.0)
    samples = np.floor(clipped * 255.0 + 0.5).astype(np.uint8)
    arr = samples.transpose(1, 2, 0)
    return ImageRGB8(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def psnr(a: Tensor, b: Tensor) -> float:
    """10*log10(1/MSE) on unit-range images; capped at 99 dB."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_index(a: Tensor, b: Tensor) -> float:
    """Mean local SSIM; shares the windowed computation with the loss."""
    return float(ssim_map(a, b).mean().item())
