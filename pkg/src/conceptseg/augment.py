"""Augmented views: geometric crop/resize/flip plus photometric jitter and blur.

Geometry is realized by nearest-neighbour sampling so every view pixel maps to
exactly one source pixel. That mapping is what lets segments and per-pixel
parameters be carried between views without interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    resize_range: tuple[float, float] = (0.8, 1.25)
    crop_size: int = 48
    flip_prob: float = 0.5
    jitter: float = 0.1
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)


@dataclass(frozen=True)
class ViewTransform:
    """One augmented view of a source image.

    ``crop`` is ``(top, left, height, width)`` in source pixels; ``out_shape`` is
    the view size. ``jitter`` holds ``(brightness, contrast, saturation)``.
    """

    source_shape: tuple[int, int]
    crop: tuple[int, int, int, int]
    out_shape: tuple[int, int]
    flip: bool = False
    jitter: tuple[float, float, float] = (0.0, 1.0, 1.0)
    blur_sigma: float = 0.0
    _coords: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        top, left, h, w = self.crop
        sh, sw = self.source_shape
        if h < 1 or w < 1 or self.out_shape[0] < 1 or self.out_shape[1] < 1:
            raise ValueError(f"empty crop or output: {self.crop} -> {self.out_shape}")
        if top < 0 or left < 0 or top + h > sh or left + w > sw:
            raise ValueError(
                f"crop {self.crop} maps outside the {sh}x{sw} source image")

    @classmethod
    def identity(cls, height: int, width: int) -> "ViewTransform":
        return cls((height, width), (0, 0, height, width), (height, width))

    def source_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Source (row, col) index arrays of shape ``out_shape``."""
        if self._coords is None:
            top, left, h, w = self.crop
            oh, ow = self.out_shape
            rows = top + np.minimum((np.arange(oh) * h) // oh, h - 1)
            cols = left + np.minimum((np.arange(ow) * w) // ow, w - 1)
            if self.flip:
                cols = cols[::-1]
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            object.__setattr__(self, "_coords", (rr, cc))
        return self._coords

    def source_index(self) -> np.ndarray:
        """Flat source pixel index for each view pixel (row-major, shape ``out_shape``)."""
        rr, cc = self.source_coords()
        return rr * self.source_shape[1] + cc

    def warp(self, array: np.ndarray) -> np.ndarray:
        """Resample any per-pixel array (H, W, ...) of the source into the view."""
        rr, cc = self.source_coords()
        return array[rr, cc]

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Full augmentation of an RGB image in [0, 1]."""
        out = self.warp(image).astype(np.float64)
        brightness, contrast, saturation = self.jitter
        if (brightness, contrast, saturation) != (0.0, 1.0, 1.0):
            gray = out.mean(axis=2, keepdims=True)
            out = gray + (out - gray) * saturation
            mean = out.mean()
            out = (out - mean) * contrast + mean + brightness
            out = np.clip(out, 0.0, 1.0)
        if self.blur_sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=(self.blur_sigma, self.blur_sigma, 0))
        return out


def random_view(rng: np.random.Generator, source_shape: tuple[int, int],
                cfg: AugmentConfig) -> ViewTransform:
    sh, sw = source_shape
    out = min(cfg.crop_size, sh, sw)
    scale = rng.uniform(*cfg.resize_range)
    side = int(np.clip(round(out / scale), 1, min(sh, sw)))
    top = int(rng.integers(0, sh - side + 1))
    left = int(rng.integers(0, sw - side + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    j = cfg.jitter
    jitter = (float(rng.uniform(-j, j)), float(rng.uniform(1 - j, 1 + j)),
              float(rng.uniform(1 - j, 1 + j)))
    blur = float(rng.uniform(*cfg.blur_sigma_range)) if rng.random() < cfg.blur_prob else 0.0
    return ViewTransform(source_shape, (top, left, side, side), (out, out), flip, jitter, blur)
