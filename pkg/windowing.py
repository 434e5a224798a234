"""Window partitioning for [H, W, C] feature maps.

Token order inside a window is row-major: window r = row_r * w_windows + col_r,
and token i * M + j of window r comes from pixel (row_r * M + i, col_r * M + j).
Maps that M does not divide are reflect-padded on the bottom/right first.
"""
from typing import Tuple

import numpy as np
from loguru import logger

from errors import ContractError, ShapeError
from models import RegionGrid
from tensor import Tensor

# Added to pre-softmax scores of forbidden pairs; exp() underflows to exactly 0.
MASK_VALUE = -1e9


def region_grid(height: int, width: int, window_size: int) -> RegionGrid:
    if window_size < 1:
        raise ContractError(f"window size must be >= 1, got {window_size}")
    if height < 1 or width < 1:
        raise ShapeError("feature map must be at least 1x1", (height, width))
    pad_bottom = (-height) % window_size
    pad_right = (-width) % window_size
    return RegionGrid(
        h_windows=(height + pad_bottom) // window_size,
        w_windows=(width + pad_right) // window_size,
        window_size=window_size,
        feature_h=height,
        feature_w=width,
        pad_bottom=pad_bottom,
        pad_right=pad_right,
    )


def reflect_indices(size: int, pad: int) -> np.ndarray:
    """Source index for each position of a length-`size` axis reflect-padded by `pad` at the end."""
    return np.pad(np.arange(size), (0, pad), mode="reflect")


def pad_to_grid(x: Tensor, grid: RegionGrid) -> Tensor:
    if grid.pad_bottom:
        x = x.take(reflect_indices(grid.feature_h, grid.pad_bottom), axis=0)
    if grid.pad_right:
        x = x.take(reflect_indices(grid.feature_w, grid.pad_right), axis=1)
    return x


def crop_to_grid(x: Tensor, grid: RegionGrid) -> Tensor:
    if grid.pad_bottom or grid.pad_right:
        return x[: grid.feature_h, : grid.feature_w]
    return x


def partition_windows(x: Tensor, window_size: int) -> Tuple[Tensor, RegionGrid]:
    """Split [H, W, C] into [n_regions, M*M, C] windows plus the grid that undoes it."""
    if x.ndim != 3:
        raise ShapeError("partition_windows expects an [H, W, C] map", x.shape)
    height, width, channels = x.shape
    grid = region_grid(height, width, window_size)
    if grid.pad_bottom or grid.pad_right:
        logger.debug(f"reflect-padding {height}x{width} by ({grid.pad_bottom}, {grid.pad_right}) for M={window_size}")
    m = window_size
    padded = pad_to_grid(x, grid)
    windows = (
        padded.reshape(grid.h_windows, m, grid.w_windows, m, channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(grid.n_regions, grid.tokens_per_region, channels)
    )
    return windows, grid


def merge_windows(windows: Tensor, grid: RegionGrid) -> Tensor:
    """Inverse of `partition_windows`, including the crop of any padding."""
    m = grid.window_size
    if windows.ndim != 3 or windows.shape[:2] != (grid.n_regions, grid.tokens_per_region):
        raise ShapeError(
            "windows do not match the region grid", windows.shape, (grid.n_regions, grid.tokens_per_region, -1)
        )
    channels = windows.shape[2]
    padded = (
        windows.reshape(grid.h_windows, grid.w_windows, m, m, channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(grid.padded_h, grid.padded_w, channels)
    )
    return crop_to_grid(padded, grid)


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of an [H, W, C] map; shifts are taken modulo H and W."""
    if x.ndim != 3:
        raise ShapeError("cyclic_shift expects an [H, W, C] map", x.shape)
    return x.roll((dy % x.shape[0], dx % x.shape[1]), axes=(0, 1))


def shift_region_labels(grid: RegionGrid, shift: int) -> np.ndarray:
    """Label each padded pixel by the pre-shift region it comes from after rolling by -shift."""
    labels = np.zeros((grid.padded_h, grid.padded_w))
    m = grid.window_size
    spans_h = (slice(0, grid.padded_h - m), slice(grid.padded_h - m, grid.padded_h - shift), slice(grid.padded_h - shift, None))
    spans_w = (slice(0, grid.padded_w - m), slice(grid.padded_w - m, grid.padded_w - shift), slice(grid.padded_w - shift, None))
    label = 0
    for sh in spans_h:
        for sw in spans_w:
            labels[sh, sw] = label
            label += 1
    return labels


def shift_attention_mask(grid: RegionGrid, shift: int) -> Tensor:
    """[n_regions, M*M, M*M] additive mask: 0 where two tokens share a pre-shift region, MASK_VALUE elsewhere."""
    m = grid.window_size
    if not 0 <= shift < m:
        raise ContractError(f"shift must satisfy 0 <= shift < {m}, got {shift}")
    if shift == 0:
        return Tensor.zeros(grid.n_regions, grid.tokens_per_region, grid.tokens_per_region)
    labels = shift_region_labels(grid, shift)
    per_window = (
        labels.reshape(grid.h_windows, m, grid.w_windows, m)
        .transpose(0, 2, 1, 3)
        .reshape(grid.n_regions, grid.tokens_per_region)
    )
    differs = per_window[:, :, None] != per_window[:, None, :]
    return Tensor(np.where(differs, MASK_VALUE, 0.0))
