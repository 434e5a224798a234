"""Fine-grained context-aware attention (FGCA) and (shifted) window attention.

FGCA runs four steps on each M x M window: project tokens to Q/K/V, route by
region similarity (mean-pooled Q against mean-pooled K), gather the top-k
key/value windows, and run scaled dot-product attention over the gathered
tokens. Routing is shared by all heads and is not differentiated through.
"""
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from loguru import logger

from errors import ContractError, ShapeError
from models import AttentionConfig, AttentionMode, RegionGrid, RoutingResult
from tensor import Tensor, flop_stage, matmul, no_grad, softmax_lastdim
from windowing import (
    crop_to_grid,
    cyclic_shift,
    merge_windows,
    pad_to_grid,
    partition_windows,
    region_grid,
    shift_attention_mask,
)


class AttentionWeights(BaseModel):
    """Parameters of one attention sub-layer. Linear weights are [C_in, C_out] (y = x @ W + b)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    q_weight: Tensor
    k_weight: Tensor
    v_weight: Tensor
    proj_weight: Tensor
    q_bias: Optional[Tensor] = None
    k_bias: Optional[Tensor] = None
    v_bias: Optional[Tensor] = None
    proj_bias: Optional[Tensor] = None
    position_bias: Optional[Tensor] = None


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def project_qkv(x_windows: Tensor, weights: AttentionWeights) -> Tuple[Tensor, Tensor, Tensor]:
    channels = x_windows.shape[-1]
    for name in ("q_weight", "k_weight", "v_weight"):
        w = getattr(weights, name)
        if w.shape != (channels, channels):
            raise ShapeError(f"{name} must be C x C", w.shape, x_windows.shape)
    with flop_stage("projection"):
        q = linear(x_windows, weights.q_weight, weights.q_bias)
        k = linear(x_windows, weights.k_weight, weights.k_bias)
        v = linear(x_windows, weights.v_weight, weights.v_bias)
    return q, k, v


def region_descriptors(t: Tensor) -> Tensor:
    """Mean over each window's tokens: [n, M*M, C] -> [n, C]."""
    return t.mean(axis=1)


def route_topk(query_regions: Tensor, key_regions: Tensor, k: int) -> RoutingResult:
    """Region adjacency Qr @ Kr^T and per-row top-k, highest score first, ties to the smaller index."""
    if k < 1:
        raise ContractError(f"top-k must be >= 1, got {k}")
    if query_regions.shape != key_regions.shape or query_regions.ndim != 2:
        raise ShapeError("routing descriptors must both be [n, C]", query_regions.shape, key_regions.shape)
    n = query_regions.shape[0]
    k_used = min(k, n)
    if k_used < k:
        logger.debug(f"top-k {k} clamped to {k_used} regions")
    with no_grad(), flop_stage("routing"):
        adjacency = matmul(query_regions.detach(), key_regions.detach().transpose())
    order = np.argsort(-adjacency.data, axis=1, kind="stable")
    return RoutingResult(adjacency=adjacency, topk_indices=order[:, :k_used], k_used=k_used)


def gather_kv(k: Tensor, v: Tensor, routing: RoutingResult) -> Tuple[Tensor, Tensor]:
    """Concatenate each query window's routed K/V windows: [n, T, C] -> [n, k*T, C]."""
    n, tokens, channels = k.shape
    idx = routing.topk_indices
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"routing index out of range for {n} regions")
    kg = k.take(idx, axis=0).reshape(n, routing.k_used * tokens, channels)
    vg = v.take(idx, axis=0).reshape(n, routing.k_used * tokens, channels)
    return kg, vg


def check_heads(cfg: AttentionConfig, channels: int) -> None:
    if cfg.num_heads * cfg.head_dim != channels:
        logger.error(f"{cfg.num_heads} heads x {cfg.head_dim} dims does not cover {channels} channels")
        raise ShapeError(
            "num_heads * head_dim must equal the channel count", (cfg.num_heads, cfg.head_dim), (channels,)
        )


def split_heads(t: Tensor, num_heads: int) -> Tensor:
    n, tokens, channels = t.shape
    if channels % num_heads:
        raise ShapeError(f"channels not divisible by {num_heads} heads", t.shape)
    return t.reshape(n, tokens, num_heads, channels // num_heads).permute(0, 2, 1, 3)


def merge_heads(t: Tensor) -> Tensor:
    n, heads, tokens, dim = t.shape
    return t.permute(0, 2, 1, 3).reshape(n, tokens, heads * dim)


def attention_probabilities(q: Tensor, k: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d) + bias) over the key axis."""
    d = q.shape[-1]
    if d < 1 or k.shape[-1] != d:
        raise ShapeError("query and key head dims differ", q.shape, k.shape)
    with flop_stage("scores"):
        scores = matmul(q, k.transpose()) * (1.0 / np.sqrt(d))
    if bias is not None:
        scores = scores + bias
    return softmax_lastdim(scores)


def token_to_token_attention(q: Tensor, kg: Tensor, vg: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """[n, h, T, d] queries over [n, h, kT, d] gathered keys/values."""
    probs = attention_probabilities(q, kg, bias)
    with flop_stage("aggregate"):
        return matmul(probs, vg)


def fgca_windows(
    windows: Tensor, cfg: AttentionConfig, weights: AttentionWeights, mode: AttentionMode
) -> Tuple[Tensor, RoutingResult]:
    """FGCA on already-partitioned windows; returns projected outputs and the routing used."""
    check_heads(cfg, windows.shape[-1])
    q, k, v = project_qkv(windows, weights)
    routing = route_topk(region_descriptors(q), region_descriptors(k), cfg.topk(mode))
    kg, vg = gather_kv(k, v, routing)
    heads = cfg.num_heads
    out = token_to_token_attention(split_heads(q, heads), split_heads(kg, heads), split_heads(vg, heads))
    with flop_stage("projection"):
        out = linear(merge_heads(out), weights.proj_weight, weights.proj_bias)
    return out, routing


def fgca_forward(
    x: Tensor, cfg: AttentionConfig, weights: AttentionWeights, mode: AttentionMode = AttentionMode.INFER
) -> Tensor:
    """partition -> project -> route -> gather -> attend -> project -> merge, shape preserved."""
    windows, grid = partition_windows(x, cfg.window_size)
    out, routing = fgca_windows(windows, cfg, weights, mode)
    logger.debug(f"fgca {x.shape}: {grid.n_regions} regions, k={routing.k_used} ({AttentionMode(mode).value})")
    return merge_windows(out, grid)


def fgca_routing(
    x: Tensor, cfg: AttentionConfig, weights: AttentionWeights, mode: AttentionMode = AttentionMode.INFER
) -> Tuple[RoutingResult, RegionGrid]:
    windows, grid = partition_windows(x, cfg.window_size)
    check_heads(cfg, windows.shape[-1])
    with no_grad():
        q, k, _ = project_qkv(windows, weights)
    return route_topk(region_descriptors(q), region_descriptors(k), cfg.topk(mode)), grid


def relative_position_index(window_size: int) -> np.ndarray:
    """[M*M, M*M] index into a (2M-1)^2 bias table for every token pair of a window."""
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (m - 1)
    return rel[:, :, 0] * (2 * m - 1) + rel[:, :, 1]


def relative_position_bias(table: Tensor, window_size: int) -> Tensor:
    """Expand a [(2M-1)^2, heads] table to a [heads, M*M, M*M] additive bias."""
    tokens = window_size * window_size
    if table.ndim != 2 or table.shape[0] != (2 * window_size - 1) ** 2:
        raise ShapeError(f"position bias table must be [(2M-1)^2, heads] for M={window_size}", table.shape)
    index = relative_position_index(window_size).reshape(-1)
    return table.take(index, axis=0).reshape(tokens, tokens, table.shape[1]).permute(2, 0, 1)


def window_attention(x: Tensor, cfg: AttentionConfig, weights: AttentionWeights, shift: int = 0) -> Tensor:
    """Self-attention inside each M x M window (WA), or after a cyclic shift with masking (SWA)."""
    m = cfg.window_size
    if x.ndim != 3:
        raise ShapeError("window_attention expects an [H, W, C] map", x.shape)
    check_heads(cfg, x.shape[2])
    grid = region_grid(x.shape[0], x.shape[1], m)
    padded = pad_to_grid(x, grid)
    if shift:
        padded = cyclic_shift(padded, -shift, -shift)
    windows, inner = partition_windows(padded, m)
    q, k, v = project_qkv(windows, weights)
    heads = cfg.num_heads
    bias = None
    if weights.position_bias is not None:
        bias = relative_position_bias(weights.position_bias, m)
    if shift:
        tokens = inner.tokens_per_region
        mask = shift_attention_mask(inner, shift).reshape(inner.n_regions, 1, tokens, tokens)
        bias = mask if bias is None else bias + mask
    out = token_to_token_attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), bias)
    with flop_stage("projection"):
        out = linear(merge_heads(out), weights.proj_weight, weights.proj_bias)
    merged = merge_windows(out, inner)
    if shift:
        merged = cyclic_shift(merged, shift, shift)
    return crop_to_grid(merged, grid)
