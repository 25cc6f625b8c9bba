"""Seeded synthetic low/reference image pairs.

A reference is a composition of colored rectangles and disks over a
smooth gradient; the paired low-light image multiplies it by a smooth
spatial gain in [0.05, 0.3] and adds Gaussian noise (sigma 0.02), then
clamps to [0, 1].
"""

from __future__ import annotations

import os

import numpy as np

from .imaging import ImageRGB8, save_png

GAIN_LO = 0.05
GAIN_HI = 0.3
NOISE_SIGMA = 0.02


def _reference(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = ys / max(h - 1, 1), xs / max(w - 1, 1)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b = rng.uniform(0.35, 0.6), rng.uniform(-0.25, 0.25)
        img[c] = a + b * (xs if rng.random() < 0.5 else ys)
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.3, 1.0, size=3)
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25) * min(h, w)
            mask = (ys * (h - 1) - cy) ** 2 + (xs * (w - 1) - cx) ** 2 <= r * r
        else:
            hh = rng.uniform(0.08, 0.3) * h
            ww = rng.uniform(0.08, 0.3) * w
            mask = (np.abs(ys * (h - 1) - cy) <= hh) & (np.abs(xs * (w - 1) - cx) <= ww)
        img[:, mask] = color[:, None]
    return np.clip(img, 0.3, 1.0)


def _gain_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = ys / max(h - 1, 1), xs / max(w - 1, 1)
    fy, fx = rng.uniform(0.5, 2.0, size=2)
    py, px = rng.uniform(0, 1, size=2)
    s = 0.5 * (np.sin(2 * np.pi * (fy * ys + py))
               * np.cos(2 * np.pi * (fx * xs + px)) + 1.0)
    return GAIN_LO + (GAIN_HI - GAIN_LO) * s


def synth_arrays(seed: int, index: int, h: int = 64, w: int = 64):
    """One deterministic pair: (low, reference, gain), all [3,H,W]/[H,W]."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    ref = _reference(rng, h, w)
    gain = _gain_field(rng, h, w)
    noise = rng.normal(0.0, NOISE_SIGMA, size=ref.shape)
    low = np.clip(ref * gain[None] + noise, 0.0, 1.0)
    return low, ref, gain


def _to_image(arr: np.ndarray) -> ImageRGB8:
    samples = np.floor(np.clip(arr, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    hwc = samples.transpose(1, 2, 0)
    return ImageRGB8(width=hwc.shape[1], height=hwc.shape[0], pixels=hwc)


def generate_dataset(out_dir, count: int, seed: int, size: int = 64) -> list:
    """Write paired PNGs under out_dir/low and out_dir/ref; returns names."""
    low_dir = os.path.join(out_dir, "low")
    ref_dir = os.path.join(out_dir, "ref")
    os.makedirs(low_dir, exist_ok=True)
    os.makedirs(ref_dir, exist_ok=True)
    names = []
    for i in range(count):
        low, ref, _ = synth_arrays(seed, i, size, size)
        name = f"pair_{i:03d}.png"
        save_png(os.path.join(low_dir, name), _to_image(low))
        save_png(os.path.join(ref_dir, name), _to_image(ref))
        names.append(name)
    return names
