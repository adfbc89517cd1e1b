"""Synthetic degradation: blur, downsample, noise, JPEG, upsample.

Images are float arrays (3, H, W) with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import jpeg, kernels
from .tensorcore import Rng


@dataclass(frozen=True)
class DegradationParams:
    sigma: float = 0.0  # blur std in pixels
    r: float = 1.0  # down/up scale factor
    delta: float = 0.0  # noise std in 0-255 units
    q: int = 100  # JPEG quality

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.r < 1:
            raise ValueError(f"scale factor r must be >= 1, got {self.r}")
        if self.delta < 0:
            raise ValueError(f"noise level delta must be >= 0, got {self.delta}")
        if not 1 <= self.q <= 100:
            raise ValueError(f"JPEG quality must be in [1, 100], got {self.q}")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DegradationPreset:
    name: str
    sigma: tuple
    r: tuple
    delta: tuple
    q: tuple

    def __post_init__(self):
        for field, lo_min in (("sigma", 0.0), ("r", 1.0), ("delta", 0.0), ("q", 1)):
            lo, hi = getattr(self, field)
            if lo < lo_min or hi < lo:
                raise ValueError(f"preset {self.name}: bad {field} range {(lo, hi)}")
        if self.q[1] > 100:
            raise ValueError(f"preset {self.name}: JPEG quality above 100")


PRESETS = {
    "moderate": DegradationPreset("moderate", sigma=(0.0, 8.0), r=(1.0, 8.0), delta=(0.0, 15.0), q=(60, 100)),
    "severe": DegradationPreset("severe", sigma=(8.0, 16.0), r=(8.0, 32.0), delta=(0.0, 20.0), q=(30, 100)),
    "training": DegradationPreset("training", sigma=(0.0, 16.0), r=(1.0, 32.0), delta=(0.0, 20.0), q=(30, 100)),
}

IDENTITY = DegradationParams()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(3 sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with reflect borders; sigma 0 returns the input unchanged."""
    if sigma == 0:
        return np.asarray(image).copy()
    k = gaussian_kernel(sigma)
    img = np.ascontiguousarray(image, dtype=np.float64)
    return kernels.blur_axis(kernels.blur_axis(img, k, 1), k, 2)


def resampled_size(size: int, factor: float) -> int:
    out = int(round(size / factor))
    if out < 1:
        raise ValueError(f"downsampling {size} px by {factor} leaves {out} px")
    return out


def resample(image: np.ndarray, factor: float, direction: str = "down", size=None) -> np.ndarray:
    """Bilinear resize by ``factor``.

    ``direction='down'`` produces round(H / factor) x round(W / factor);
    ``direction='up'`` needs the target ``size`` (H, W), normally the
    original extents.
    """
    if factor < 1:
        raise ValueError(f"resample factor must be >= 1, got {factor}")
    img = np.ascontiguousarray(image, dtype=np.float64)
    _, h, w = img.shape
    if direction == "down":
        oh, ow = resampled_size(h, factor), resampled_size(w, factor)
    elif direction == "up":
        if size is None:
            oh, ow = int(round(h * factor)), int(round(w * factor))
        else:
            oh, ow = size
        if oh < 1 or ow < 1:
            raise ValueError(f"resample target {oh}x{ow} is empty")
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if (oh, ow) == (h, w):
        return img.copy()
    return kernels.bilinear_resize(img, oh, ow)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64).transpose(2, 0, 1) / 255.0


def jpeg_compress(image: np.ndarray, q: int, subsampling: str = "4:4:4") -> np.ndarray:
    return from_uint8(jpeg.round_trip(to_uint8(image), int(q), subsampling))


def degrade(image: np.ndarray, params: DegradationParams, rng: Rng, subsampling: str = "4:4:4") -> np.ndarray:
    """blur -> down(r) -> noise -> clip -> JPEG(q) -> up(r), back at the input extents."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"degrade expects a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    x = gaussian_blur(img, params.sigma)
    x = resample(x, params.r, "down")
    if params.delta > 0:
        x = x + rng.normal(x.shape, std=params.delta / 255.0).astype(np.float64)
    x = np.clip(x, 0.0, 1.0)
    x = jpeg_compress(x, params.q, subsampling)
    return resample(x, params.r, "up", size=(h, w))


def sample_params(preset: str | DegradationPreset, rng: Rng) -> DegradationParams:
    """Independent uniform draws; quality is an integer in its inclusive range."""
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown degradation preset {preset!r}; expected one of {sorted(PRESETS)}")
        preset = PRESETS[preset]
    u = rng.uniform(0.0, 1.0, size=3)
    sigma = preset.sigma[0] + u[0] * (preset.sigma[1] - preset.sigma[0])
    r = preset.r[0] + u[1] * (preset.r[1] - preset.r[0])
    delta = preset.delta[0] + u[2] * (preset.delta[1] - preset.delta[0])
    q = int(rng.integers(preset.q[0], preset.q[1] + 1))
    return DegradationParams(float(sigma), float(r), float(delta), q)
