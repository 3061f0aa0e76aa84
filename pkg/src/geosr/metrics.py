"""Image quality and conditioning metrics on float images in [0, 1].

Images are numpy arrays shaped (H, W, 3) or (H, W). Torch tensors shaped
(3, H, W) are accepted and converted.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .errors import InputError

PSNR_INF = math.inf
HUE_UNDEFINED = math.nan

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def as_hwc(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().double().numpy()
        if img.ndim == 4:
            if img.shape[0] != 1:
                raise InputError("expected a single image, got a batch")
            img = img[0]
        if img.ndim == 3 and img.shape[0] in (1, 3):
            img = np.moveaxis(img, 0, -1)
    return np.asarray(img, dtype=np.float64)


def _same_shape(a, b):
    a, b = as_hwc(a), as_hwc(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for data range 1; identical images give ``math.inf``."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def format_metric(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf"
    return repr(float(value))


def to_gray(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img @ GRAY_WEIGHTS


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    """Single-scale SSIM on luminance, Gaussian 11x11 window, valid positions."""
    a, b = _same_shape(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise InputError(f"image {x.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def rgb_to_hue(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel HSV hue in [0, 1) and chroma (max - min)."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx, mn = img.max(axis=-1), img.min(axis=-1)
    chroma = mx - mn
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(chroma > 0, h / 6.0, 0.0)
    return h % 1.0, chroma


def mean_hue(img) -> float:
    """Chroma-weighted circular mean hue, or ``nan`` for an achromatic image."""
    img = as_hwc(img)
    h, chroma = rgb_to_hue(img)
    angle = 2 * np.pi * h
    z = complex(np.sum(chroma * np.cos(angle)), np.sum(chroma * np.sin(angle)))
    if abs(z) <= 1e-9 * h.size:
        return HUE_UNDEFINED
    return (math.atan2(z.imag, z.real) / (2 * math.pi)) % 1.0


def circular_distance(h1: float, h2: float) -> float:
    d = abs(h1 - h2) % 1.0
    return min(d, 1.0 - d)


def hue_error(sr, hr_hue_truth: float) -> float:
    """Circular distance in [0, 0.5] between the mean hue of ``sr`` and the truth.

    Returns ``nan`` (``HUE_UNDEFINED``) when ``sr`` has no chromatic pixels.
    """
    h = mean_hue(sr)
    if math.isnan(h):
        return HUE_UNDEFINED
    return circular_distance(h, hr_hue_truth)


# Perceptual-distance hooks (LPIPS, CLIP score) take (sr, hr) and return a
# float. Evaluation emits "n/a" for a hook that is not supplied.
PerceptualHook = Callable[[np.ndarray, np.ndarray], float]
