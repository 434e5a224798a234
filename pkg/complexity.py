"""Analytical FLOPs / peak-memory models for fixed-window (ours) vs variable-window (prev) routing attention.

Counting convention: one multiply-accumulate is 2 FLOPs. The attention term of
both closed forms is the QK^T score product; the softmax(.)V aggregation costs
the same again and is tracked separately by the measuring instrument.

    prev:  routing   = 2 (S^2)^2 C            (S^2 regions of HW/S^2 tokens)
           attention = 2 k (HW)^2 C / S^2
    ours:  routing   = 2 (HW/M^2)^2 C         (HW/M^2 regions of M^2 tokens)
           attention = 2 k M^2 HW C

k is clamped to the number of regions, as the routing step does.
"""
import csv
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from loguru import logger

from attention import AttentionWeights, fgca_forward
from errors import ContractError
from models import AttentionMode, CostGridPoint, CostReport, CostVariant, ModelConfig
from tensor import FlopCounter, Tensor, no_grad

# Query rows per score tile in the tiled memory mode.
TILE_ROWS = 64

CSV_COLUMNS = [
    "variant",
    "height",
    "width",
    "channels",
    "window",
    "topk",
    "routing_flops",
    "attention_flops",
    "total_flops",
    "peak_intermediate_bytes",
    "tiled",
]


def _check_positive(**dims: int) -> None:
    for name, value in dims.items():
        if value < 1:
            logger.error(f"cost model dimension {name}={value} must be positive")
            raise ContractError(f"cost model dimension {name} must be positive, got {value}")


def _ours_layout(height: int, width: int, window: int):
    """(regions, tokens per region) of the fixed-window scheme, counting bottom/right padding."""
    n = -(-height // window) * -(-width // window)
    return n, window * window


def _prev_layout(height: int, width: int, side: int):
    regions = side * side
    if (height * width) % regions:
        logger.error(f"H*W={height * width} is not divisible by S^2={regions}")
        raise ContractError(f"H*W ({height * width}) must be divisible by the S^2={regions} region count")
    return regions, (height * width) // regions


def _layout(variant: CostVariant, height: int, width: int, m_or_s: int):
    if CostVariant(variant) == CostVariant.OURS:
        return _ours_layout(height, width, m_or_s)
    return _prev_layout(height, width, m_or_s)


def peak_attention_memory(
    variant: CostVariant,
    height: int,
    width: int,
    channels: int,
    m_or_s: int,
    topk: int,
    bytes_per_scalar: int = 4,
    tiled: bool = False,
    num_heads: int = 1,
) -> int:
    """Peak bytes of attention intermediates (weights excluded).

    Untiled, the gathered K and V, the score matrix and the softmax output are
    all live at the softmax step. Tiled, scores and probabilities exist for one
    block-row of at most TILE_ROWS queries of one region at a time.
    """
    _check_positive(height=height, width=width, channels=channels, m_or_s=m_or_s, topk=topk)
    _check_positive(bytes_per_scalar=bytes_per_scalar, num_heads=num_heads)
    regions, tokens = _layout(variant, height, width, m_or_s)
    keys = min(topk, regions) * tokens
    gathered = 2 * regions * keys * channels
    if tiled:
        scores = min(tokens, TILE_ROWS) * keys * num_heads
    else:
        scores = regions * tokens * keys * num_heads
    return (gathered + 2 * scores) * bytes_per_scalar


def flops_prev(
    height: int, width: int, channels: int, side: int, topk: int, bytes_per_scalar: int = 4, tiled: bool = False
) -> CostReport:
    """Variable-window routing attention with S^2 regions (side = S)."""
    _check_positive(height=height, width=width, channels=channels, side=side, topk=topk)
    regions, tokens = _prev_layout(height, width, side)
    k = min(topk, regions)
    return CostReport(
        variant=CostVariant.PREV,
        height=height,
        width=width,
        channels=channels,
        window=side,
        topk=k,
        bytes_per_scalar=bytes_per_scalar,
        routing_flops=2 * regions * regions * channels,
        attention_flops=2 * k * regions * tokens * tokens * channels,
        peak_intermediate_bytes=peak_attention_memory(
            CostVariant.PREV, height, width, channels, side, k, bytes_per_scalar, tiled
        ),
        tiled=tiled,
    )


def flops_ours(
    height: int, width: int, channels: int, window: int, topk: int, bytes_per_scalar: int = 4, tiled: bool = False
) -> CostReport:
    """Fixed M x M windows; maps M does not divide are counted at their padded size."""
    _check_positive(height=height, width=width, channels=channels, window=window, topk=topk)
    regions, tokens = _ours_layout(height, width, window)
    k = min(topk, regions)
    return CostReport(
        variant=CostVariant.OURS,
        height=height,
        width=width,
        channels=channels,
        window=window,
        topk=k,
        bytes_per_scalar=bytes_per_scalar,
        routing_flops=2 * regions * regions * channels,
        attention_flops=2 * k * tokens * regions * tokens * channels,
        peak_intermediate_bytes=peak_attention_memory(
            CostVariant.OURS, height, width, channels, window, k, bytes_per_scalar, tiled
        ),
        tiled=tiled,
    )


def random_attention_weights(channels: int, seed: int = 0) -> AttentionWeights:
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(channels)
    return AttentionWeights(
        q_weight=Tensor(rng.normal(0.0, std, (channels, channels))),
        k_weight=Tensor(rng.normal(0.0, std, (channels, channels))),
        v_weight=Tensor(rng.normal(0.0, std, (channels, channels))),
        proj_weight=Tensor(rng.normal(0.0, std, (channels, channels))),
    )


def measured_attention_flops(
    cfg: ModelConfig, height: int, width: int, mode: AttentionMode = AttentionMode.INFER, seed: int = 0
) -> int:
    """Routing + score FLOPs counted by the tensor engine during one fgca_forward."""
    _check_positive(height=height, width=width, channels=cfg.embed_dim)
    att_cfg = cfg.attention_config()
    weights = random_attention_weights(cfg.embed_dim, seed)
    x = Tensor(np.random.default_rng(seed + 1).normal(size=(height, width, cfg.embed_dim)))
    with no_grad(), FlopCounter() as counter:
        fgca_forward(x, att_cfg, weights, mode)
    logger.debug(f"measured FLOPs at {height}x{width}: {dict(counter.by_stage)}")
    return counter.by_stage["routing"] + counter.by_stage["scores"]


def cost_report(
    variant: CostVariant, point: CostGridPoint, tiled: bool = False
) -> CostReport:
    if CostVariant(variant) == CostVariant.OURS:
        return flops_ours(
            point.height, point.width, point.channels, point.window_size, point.topk, point.bytes_per_scalar, tiled
        )
    return flops_prev(
        point.height, point.width, point.channels, point.region_side, point.topk, point.bytes_per_scalar, tiled
    )


def sweep_costs(
    grid: Sequence[CostGridPoint],
    variants: Sequence[CostVariant] = (CostVariant.PREV, CostVariant.OURS),
    tiled: bool = False,
) -> List[CostReport]:
    """One row per (grid point, variant), in grid order then variant order."""
    rows = [cost_report(variant, point, tiled) for point in grid for variant in variants]
    logger.info(f"cost sweep: {len(grid)} grid points x {len(variants)} variants")
    return rows


def find_crossover(rows: Iterable[CostReport]) -> Optional[int]:
    """Smallest H*W from which ours has fewer total FLOPs than prev at every larger swept size."""
    by_tokens = {}
    for row in rows:
        by_tokens.setdefault(row.tokens, {})[CostVariant(row.variant)] = row.total_flops
    crossover = None
    for tokens in sorted(by_tokens, reverse=True):
        pair = by_tokens[tokens]
        if CostVariant.OURS not in pair or CostVariant.PREV not in pair:
            continue
        if pair[CostVariant.OURS] < pair[CostVariant.PREV]:
            crossover = tokens
        else:
            break
    return crossover


_GRID_CELL = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*$")


def parse_grid(spec: str, base: Optional[CostGridPoint] = None) -> List[CostGridPoint]:
    """Parse "64x64,128x128" into grid points sharing the non-spatial fields of `base`."""
    base = base or CostGridPoint(height=1, width=1)
    points = []
    for cell in spec.split(","):
        match = _GRID_CELL.match(cell)
        if not match or int(match.group(1)) < 1 or int(match.group(2)) < 1:
            logger.error(f"malformed grid cell {cell!r} in {spec!r}")
            raise ValueError(f"malformed grid cell {cell!r}; expected HxW with positive integers")
        points.append(base.model_copy(update={"height": int(match.group(1)), "width": int(match.group(2))}))
    return points


def write_cost_csv(rows: Sequence[CostReport], path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            record = row.model_dump()
            writer.writerow([record[column] for column in CSV_COLUMNS[:-1]] + [int(row.tiled)])
    logger.info(f"wrote {len(rows)} cost rows to {path}")
