"""Image-quality metrics on magnitude images: peak signal-to-noise ratio and
the structural similarity index (Gaussian 11x11 window, std 1.5, K1=0.01,
K2=0.03, dynamic range = max magnitude of the reference, mean over the valid
window positions)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .numerics import ComplexImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _magnitudes(x: ComplexImage, ref: ComplexImage):
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return np.abs(x.data), np.abs(ref.data)


def psnr(x: ComplexImage, ref: ComplexImage) -> float:
    """20 log10(max|ref| / rmse(|x|, |ref|)) in dB; +inf for identical inputs."""
    mx, mref = _magnitudes(x, ref)
    peak = float(mref.max())
    if peak == 0.0:
        raise ValueError("reference image is all-zero")
    mse = float(np.mean((mx - mref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak / np.sqrt(mse)))


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _ssim_kernel()


def _filt(a: np.ndarray) -> np.ndarray:
    pad = SSIM_WINDOW // 2
    out = ndimage.convolve(a, _KERNEL, mode="constant")
    return out[pad:-pad, pad:-pad]


def ssim(x: ComplexImage, ref: ComplexImage) -> float:
    """Mean structural similarity of the magnitude images."""
    mx, mref = _magnitudes(x, ref)
    if min(mx.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    peak = float(mref.max())
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _filt(mx)
    mu_r = _filt(mref)
    var_x = _filt(mx * mx) - mu_x**2
    var_r = _filt(mref * mref) - mu_r**2
    cov = _filt(mx * mref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    return float(np.mean(num / den))
