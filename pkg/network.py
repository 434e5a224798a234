"""The three-stage super-resolution network and its parameter bookkeeping.

shallow 3x3 conv -> K residual SSCAN blocks (L FGCA blocks + 3x3 conv each)
-> 3x3 conv + global residual -> 3x3 conv + pixel shuffle.

Every FGCA block stacks attention sub-layers in the configured order; each
sub-layer is x + Attn(LN(x)) followed by x + MLP(LN(x)).
"""
from collections import OrderedDict
from typing import Dict, List, Tuple

import numpy as np
from scipy.stats import truncnorm
from loguru import logger

from attention import AttentionWeights, fgca_forward, fgca_routing, linear, window_attention
from errors import ContractError, MissingWeightError, ShapeError
from models import AttentionMode, LayerOrder, ModelConfig, RegionGrid, RoutingResult, SubLayer, WeightStore
from tensor import Tensor, conv2d, gelu, layer_norm, no_grad
from windowing import reflect_indices, region_grid

LAYER_SEQUENCES: Dict[LayerOrder, List[SubLayer]] = {
    LayerOrder.FGCA_FIRST: [SubLayer.FGCA, SubLayer.WA, SubLayer.SWA],
    LayerOrder.WA_FIRST: [SubLayer.WA, SubLayer.SWA, SubLayer.FGCA],
    LayerOrder.WA_ONLY: [SubLayer.WA, SubLayer.SWA],
}

LINEAR_INIT_STD = 0.02


def layer_sequence(cfg: ModelConfig) -> List[SubLayer]:
    return list(LAYER_SEQUENCES[LayerOrder(cfg.layer_order)])


def block_prefix(sscan: int, fgca: int) -> str:
    return f"sscan.{sscan}.fgca.{fgca}"


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape for every learned tensor, in canonical order."""
    c, c_in, hidden = cfg.embed_dim, cfg.in_channels, cfg.mlp_hidden
    table = (2 * cfg.window_size - 1) ** 2
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["shallow.weight"] = (c, c_in, 3, 3)
    shapes["shallow.bias"] = (c,)
    for i in range(cfg.n_sscan_blocks):
        for j in range(cfg.n_fgca_blocks):
            for kind in layer_sequence(cfg):
                p = f"{block_prefix(i, j)}.{kind.value}"
                shapes[f"{p}.norm_attn.gamma"] = (c,)
                shapes[f"{p}.norm_attn.beta"] = (c,)
                for proj in ("q", "k", "v"):
                    shapes[f"{p}.attn.{proj}.weight"] = (c, c)
                    if cfg.qkv_bias:
                        shapes[f"{p}.attn.{proj}.bias"] = (c,)
                shapes[f"{p}.attn.proj.weight"] = (c, c)
                shapes[f"{p}.attn.proj.bias"] = (c,)
                if kind != SubLayer.FGCA:
                    shapes[f"{p}.attn.position_bias"] = (table, cfg.num_heads)
                shapes[f"{p}.norm_mlp.gamma"] = (c,)
                shapes[f"{p}.norm_mlp.beta"] = (c,)
                shapes[f"{p}.mlp.fc1.weight"] = (c, hidden)
                shapes[f"{p}.mlp.fc1.bias"] = (hidden,)
                shapes[f"{p}.mlp.fc2.weight"] = (hidden, c)
                shapes[f"{p}.mlp.fc2.bias"] = (c,)
        shapes[f"sscan.{i}.conv.weight"] = (c, c, 3, 3)
        shapes[f"sscan.{i}.conv.bias"] = (c,)
    shapes["deep.conv.weight"] = (c, c, 3, 3)
    shapes["deep.conv.bias"] = (c,)
    shapes["recon.conv.weight"] = (c_in * cfg.scale**2, c, 3, 3)
    shapes["recon.conv.bias"] = (c_in * cfg.scale**2,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(cfg).values()))


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightStore:
    """Truncated-normal (std 0.02, +-2 std) linear/attention weights, zero biases,
    unit LayerNorm gains, fan-in scaled normal conv filters. Deterministic by seed."""
    rng = np.random.default_rng(seed)
    store: WeightStore = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            data = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        else:
            data = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=LINEAR_INIT_STD, size=shape, random_state=rng)
        store[name] = Tensor(data)
    logger.debug(f"initialised {len(store)} tensors ({count_params(cfg):,} parameters) with seed {seed}")
    return store


def validate_weights(store: WeightStore, cfg: ModelConfig) -> None:
    expected = parameter_shapes(cfg)
    for name, shape in expected.items():
        if name not in store:
            logger.error(f"weight store lacks {name}")
            raise MissingWeightError(name)
        if store[name].shape != shape:
            logger.error(f"weight {name} has shape {store[name].shape}, expected {shape}")
            raise ShapeError(f"weight {name} has the wrong shape", store[name].shape, shape)
    extra = [name for name in store if name not in expected]
    if extra:
        logger.error(f"weight store has {len(extra)} unexpected tensors, e.g. {extra[0]}")
        raise ContractError(f"unexpected weights for this configuration: {', '.join(extra[:5])}")


def _get(store: WeightStore, name: str) -> Tensor:
    try:
        return store[name]
    except KeyError:
        raise MissingWeightError(name) from None


def attention_weights(store: WeightStore, prefix: str) -> AttentionWeights:
    """Collect the `<prefix>.attn.*` tensors of one sub-layer."""
    p = f"{prefix}.attn"
    return AttentionWeights(
        q_weight=_get(store, f"{p}.q.weight"),
        k_weight=_get(store, f"{p}.k.weight"),
        v_weight=_get(store, f"{p}.v.weight"),
        proj_weight=_get(store, f"{p}.proj.weight"),
        q_bias=store.get(f"{p}.q.bias"),
        k_bias=store.get(f"{p}.k.bias"),
        v_bias=store.get(f"{p}.v.bias"),
        proj_bias=store.get(f"{p}.proj.bias"),
        position_bias=store.get(f"{p}.position_bias"),
    )


def _norm(x: Tensor, store: WeightStore, prefix: str, cfg: ModelConfig) -> Tensor:
    return layer_norm(x, _get(store, f"{prefix}.gamma"), _get(store, f"{prefix}.beta"), cfg.ln_eps)


def mlp(x: Tensor, store: WeightStore, prefix: str) -> Tensor:
    hidden = gelu(linear(x, _get(store, f"{prefix}.fc1.weight"), _get(store, f"{prefix}.fc1.bias")))
    return linear(hidden, _get(store, f"{prefix}.fc2.weight"), _get(store, f"{prefix}.fc2.bias"))


def attention_sublayer(
    x: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode, prefix: str, kind: SubLayer
) -> Tensor:
    att_cfg = cfg.attention_config()
    normed = _norm(x, weights, f"{prefix}.norm_attn", cfg)
    aw = attention_weights(weights, prefix)
    if kind == SubLayer.FGCA:
        attended = fgca_forward(normed, att_cfg, aw, mode)
    elif kind == SubLayer.WA:
        attended = window_attention(normed, att_cfg, aw, shift=0)
    else:
        attended = window_attention(normed, att_cfg, aw, shift=att_cfg.shift_size)
    x = x + attended
    return x + mlp(_norm(x, weights, f"{prefix}.norm_mlp", cfg), weights, f"{prefix}.mlp")


def fgca_block_forward(
    x: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode, prefix: str = "sscan.0.fgca.0"
) -> Tensor:
    """One FGCA block on an [H, W, C] map."""
    for kind in layer_sequence(cfg):
        x = attention_sublayer(x, cfg, weights, mode, f"{prefix}.{kind.value}", kind)
    return x


def sscan_block_forward(
    x: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode, index: int = 0
) -> Tensor:
    """Residual SSCAN block on a [C, H, W] map: conv(FGCA blocks(x)) + x."""
    h = x.permute(1, 2, 0)
    for j in range(cfg.n_fgca_blocks):
        h = fgca_block_forward(h, cfg, weights, mode, prefix=block_prefix(index, j))
    h = h.permute(2, 0, 1)
    out = conv2d(h, _get(weights, f"sscan.{index}.conv.weight"), _get(weights, f"sscan.{index}.conv.bias"), 1, 1)
    return out + x


def shallow_extract(i_lr: Tensor, weights: WeightStore) -> Tensor:
    return conv2d(i_lr, _get(weights, "shallow.weight"), _get(weights, "shallow.bias"), stride=1, pad=1)


def deep_extract(f0: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode) -> Tensor:
    """F_DF = conv(SSCAN_K(...SSCAN_1(F_0))) + F_0."""
    h = f0
    for i in range(cfg.n_sscan_blocks):
        h = sscan_block_forward(h, cfg, weights, mode, index=i)
    return conv2d(h, _get(weights, "deep.conv.weight"), _get(weights, "deep.conv.bias"), stride=1, pad=1) + f0


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """[C*r^2, H, W] -> [C, rH, rW]; channel c*r^2 + dy*r + dx lands at offset (dy, dx)."""
    channels, h, w = x.shape
    if channels % (scale * scale):
        raise ShapeError(f"channel count not divisible by scale^2={scale * scale}", x.shape)
    c = channels // (scale * scale)
    return x.reshape(c, scale, scale, h, w).permute(0, 3, 1, 4, 2).reshape(c, h * scale, w * scale)


def pixel_unshuffle(x: Tensor, scale: int) -> Tensor:
    c, hs, ws = x.shape
    if hs % scale or ws % scale:
        raise ShapeError(f"spatial size not divisible by scale={scale}", x.shape)
    h, w = hs // scale, ws // scale
    return x.reshape(c, h, scale, w, scale).permute(0, 2, 4, 1, 3).reshape(c * scale * scale, h, w)


def reconstruct(f_df: Tensor, scale: int, weights: WeightStore) -> Tensor:
    out = conv2d(f_df, _get(weights, "recon.conv.weight"), _get(weights, "recon.conv.bias"), stride=1, pad=1)
    return pixel_shuffle(out, scale)


def pad_input(i_lr: Tensor, grid: RegionGrid) -> Tensor:
    """Reflect-pad a [C, H, W] image on the bottom/right to the window grid."""
    if grid.pad_bottom:
        i_lr = i_lr.take(reflect_indices(grid.feature_h, grid.pad_bottom), axis=1)
    if grid.pad_right:
        i_lr = i_lr.take(reflect_indices(grid.feature_w, grid.pad_right), axis=2)
    return i_lr


def forward(i_lr: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode = AttentionMode.INFER) -> Tensor:
    """[C_in, H, W] low-resolution image -> [C_in, scale*H, scale*W] reconstruction."""
    if i_lr.ndim != 3 or i_lr.shape[0] != cfg.in_channels:
        raise ShapeError(f"input must be [{cfg.in_channels}, H, W]", i_lr.shape)
    _, h, w = i_lr.shape
    grid = region_grid(h, w, cfg.window_size)
    if grid.pad_bottom or grid.pad_right:
        logger.warning(
            f"{h}x{w} input is not a multiple of M={cfg.window_size}: "
            f"reflect-padding by ({grid.pad_bottom}, {grid.pad_right})"
        )
    topk = cfg.attention_config().topk(mode)
    if topk > grid.n_regions:
        logger.warning(f"top-k {topk} clamped to the {grid.n_regions} regions of a {h}x{w} input")
    x = pad_input(i_lr, grid)
    f0 = shallow_extract(x, weights)
    f_df = deep_extract(f0, cfg, weights, mode)
    sr = reconstruct(f_df, cfg.scale, weights)
    if grid.pad_bottom or grid.pad_right:
        sr = sr[:, : cfg.scale * h, : cfg.scale * w]
    return sr


def first_fgca_routing(
    i_lr: Tensor, cfg: ModelConfig, weights: WeightStore, mode: AttentionMode = AttentionMode.INFER
) -> Tuple[RoutingResult, RegionGrid]:
    """Routing decision of the network's first FGCA sub-layer for this input."""
    sequence = layer_sequence(cfg)
    if SubLayer.FGCA not in sequence:
        raise ContractError(f"layer order {LayerOrder(cfg.layer_order).value} has no FGCA layer")
    _, h, w = i_lr.shape
    grid = region_grid(h, w, cfg.window_size)
    prefix = block_prefix(0, 0)
    with no_grad():
        x = shallow_extract(pad_input(i_lr, grid), weights).permute(1, 2, 0)
        for kind in sequence:
            p = f"{prefix}.{kind.value}"
            if kind == SubLayer.FGCA:
                normed = _norm(x, weights, f"{p}.norm_attn", cfg)
                routing, _ = fgca_routing(normed, cfg.attention_config(), attention_weights(weights, p), mode)
                return routing, grid
            x = attention_sublayer(x, cfg, weights, mode, p, kind)
    raise ContractError("no FGCA layer reached")
