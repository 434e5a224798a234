"""PSNR and SSIM in the usual super-resolution benchmark convention.

Scores are computed on [0, 255] floats, optionally on the BT.601 luma channel
(Y in 16..235) and after cropping `crop_border` pixels from every edge.
"""
from typing import Tuple

import numpy as np
from scipy import signal
from loguru import logger

from errors import ContractError, ShapeError
from models import ImageU8

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2

_Y_WEIGHTS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(data: np.ndarray) -> np.ndarray:
    """H x W x 3 samples in [0, 255] -> H x W x 1 luma in [16, 235]."""
    if data.shape[-1] != 3:
        raise ShapeError("rgb_to_y expects three channels", data.shape)
    y = np.asarray(data, dtype=np.float64) / 255.0 @ _Y_WEIGHTS + 16.0
    return y[..., None]


def _prepare(a: ImageU8, b: ImageU8, crop_border: int, on_y: bool) -> Tuple[np.ndarray, np.ndarray]:
    if a.data.shape != b.data.shape:
        logger.error(f"metric inputs differ in shape: {a.data.shape} vs {b.data.shape}")
        raise ShapeError("images must have identical dimensions", a.data.shape, b.data.shape)
    if crop_border < 0 or 2 * crop_border >= min(a.height, a.width):
        raise ContractError(f"crop_border={crop_border} must be below half of min({a.height}, {a.width})")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    if on_y and a.channels == 3:
        x, y = rgb_to_y(x), rgb_to_y(y)
    if crop_border:
        x = x[crop_border:-crop_border, crop_border:-crop_border]
        y = y[crop_border:-crop_border, crop_border:-crop_border]
    return x, y


def psnr(a: ImageU8, b: ImageU8, crop_border: int = 0, on_y: bool = True) -> float:
    """10 log10(255^2 / MSE); identical inputs give float('inf')."""
    x, y = _prepare(a, b, crop_border, on_y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    def filt(img: np.ndarray) -> np.ndarray:
        return signal.convolve2d(img, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x**2
    sigma_y = filt(y * y) - mu_y**2
    sigma_xy = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)) / (
        (mu_x**2 + mu_y**2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    )
    return float(ssim_map.mean())


def ssim(a: ImageU8, b: ImageU8, crop_border: int = 0, on_y: bool = True) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    x, y = _prepare(a, b, crop_border, on_y)
    if min(x.shape[0], x.shape[1]) < SSIM_WINDOW:
        logger.error(f"image of {x.shape[0]}x{x.shape[1]} after cropping is below the SSIM window")
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after cropping", x.shape)
    window = gaussian_window()
    scores = [_ssim_plane(x[..., c], y[..., c], window) for c in range(x.shape[2])]
    return float(np.mean(scores))
