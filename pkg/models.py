from typing import Dict, List, Literal, Optional
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator
from loguru import logger

from tensor import Tensor

# Named parameter map; insertion order is the canonical save order.
WeightStore = Dict[str, Tensor]


class LayerOrder(str, Enum):
    FGCA_FIRST = "fgca_first"
    WA_FIRST = "wa_first"
    WA_ONLY = "wa_only"


class SubLayer(str, Enum):
    FGCA = "fgca"
    WA = "wa"
    SWA = "swa"


class AttentionMode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class CostVariant(str, Enum):
    PREV = "prev_variable_window"
    OURS = "ours_fixed_window"


class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_size: int = Field(8, ge=1)
    num_heads: int = Field(6, ge=1)
    head_dim: int = Field(10, ge=1)
    topk_train: int = Field(32, ge=1)
    topk_infer: int = Field(64, ge=1)
    qkv_bias: bool = True

    @computed_field
    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @computed_field
    @property
    def shift_size(self) -> int:
        return self.window_size // 2

    def topk(self, mode: AttentionMode) -> int:
        return self.topk_train if AttentionMode(mode) == AttentionMode.TRAIN else self.topk_infer


class ModelConfig(BaseModel):
    """Network hyperparameters; defaults are the lightweight x4 setup (C=60, M=8, 4x2 blocks, k 32/64)."""

    model_config = ConfigDict(extra="forbid", use_enum_values=True)

    in_channels: int = Field(3, ge=1)
    embed_dim: int = Field(60, ge=1)
    n_sscan_blocks: int = Field(4, ge=1)
    n_fgca_blocks: int = Field(2, ge=1)
    window_size: int = Field(8, ge=1)
    num_heads: int = Field(6, ge=1)
    mlp_ratio: float = Field(2.0, gt=0)
    scale: Literal[2, 3, 4] = 4
    layer_order: LayerOrder = LayerOrder.FGCA_FIRST
    topk_train: int = Field(32, ge=1)
    topk_infer: int = Field(64, ge=1)
    qkv_bias: bool = True
    ln_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.embed_dim % self.num_heads != 0:
            logger.error(f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}")
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        return self

    @computed_field
    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @computed_field
    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """C=8, 2 heads, one SSCAN block of one FGCA block, M=4, x2: small enough for finite differences."""
        fields = dict(
            embed_dim=8,
            num_heads=2,
            n_sscan_blocks=1,
            n_fgca_blocks=1,
            window_size=4,
            scale=2,
            topk_train=4,
            topk_infer=8,
        )
        fields.update(overrides)
        return cls(**fields)

    def attention_config(self, topk_infer: Optional[int] = None) -> AttentionConfig:
        return AttentionConfig(
            window_size=self.window_size,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            topk_train=self.topk_train,
            topk_infer=topk_infer if topk_infer is not None else self.topk_infer,
            qkv_bias=self.qkv_bias,
        )


class RegionGrid(BaseModel):
    """How a feature map was tiled into M x M windows (padding on bottom/right only)."""

    model_config = ConfigDict(frozen=True)

    h_windows: int = Field(..., ge=1)
    w_windows: int = Field(..., ge=1)
    window_size: int = Field(..., ge=1)
    feature_h: int = Field(..., ge=1)
    feature_w: int = Field(..., ge=1)
    pad_bottom: int = Field(0, ge=0)
    pad_right: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_cover(self) -> "RegionGrid":
        if self.h_windows * self.window_size != self.feature_h + self.pad_bottom:
            raise ValueError("h_windows * window_size must equal feature_h + pad_bottom")
        if self.w_windows * self.window_size != self.feature_w + self.pad_right:
            raise ValueError("w_windows * window_size must equal feature_w + pad_right")
        return self

    @computed_field
    @property
    def n_regions(self) -> int:
        return self.h_windows * self.w_windows

    @computed_field
    @property
    def padded_h(self) -> int:
        return self.h_windows * self.window_size

    @computed_field
    @property
    def padded_w(self) -> int:
        return self.w_windows * self.window_size

    @computed_field
    @property
    def tokens_per_region(self) -> int:
        return self.window_size * self.window_size

    def region_box(self, region: int) -> tuple:
        """(top, left, bottom, right) pixel box of a region, clipped to the unpadded map."""
        row, col = divmod(region, self.w_windows)
        top, left = row * self.window_size, col * self.window_size
        return (
            top,
            left,
            min(top + self.window_size, self.feature_h) - 1,
            min(left + self.window_size, self.feature_w) - 1,
        )


class RoutingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    adjacency: Tensor
    topk_indices: np.ndarray
    k_used: int = Field(..., ge=1)

    @model_validator(mode="after")
    def check_indices(self) -> "RoutingResult":
        n = self.adjacency.shape[0]
        if self.topk_indices.shape != (n, self.k_used):
            raise ValueError(f"topk_indices shape {self.topk_indices.shape} != {(n, self.k_used)}")
        for row in self.topk_indices:
            if len(set(row.tolist())) != self.k_used:
                raise ValueError("routing rows must hold distinct region ids")
        return self

    @computed_field
    @property
    def n_regions(self) -> int:
        return self.adjacency.shape[0]


class CostReport(BaseModel):
    variant: CostVariant
    height: int = Field(..., gt=0)
    width: int = Field(..., gt=0)
    channels: int = Field(..., gt=0)
    window: int = Field(..., gt=0)
    topk: int = Field(..., gt=0)
    bytes_per_scalar: int = Field(4, gt=0)
    routing_flops: int = Field(..., ge=0)
    attention_flops: int = Field(..., ge=0)
    peak_intermediate_bytes: int = Field(0, ge=0)
    tiled: bool = False

    class Config:
        use_enum_values = True

    @computed_field
    @property
    def total_flops(self) -> int:
        return self.routing_flops + self.attention_flops

    @computed_field
    @property
    def tokens(self) -> int:
        return self.height * self.width


class CostGridPoint(BaseModel):
    """One cell of a cost sweep; M is used by the fixed-window variant, S by the prior one."""

    height: int = Field(..., gt=0)
    width: int = Field(..., gt=0)
    channels: int = Field(60, gt=0)
    window_size: int = Field(8, gt=0)
    region_side: int = Field(8, gt=0)
    topk: int = Field(64, gt=0)
    bytes_per_scalar: int = Field(4, gt=0)


class ImageU8(BaseModel):
    """8-bit image, row-major H x W x channels, RGB order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @model_validator(mode="after")
    def check_data(self) -> "ImageU8":
        if self.data.dtype != np.uint8:
            raise ValueError(f"image data must be uint8, got {self.data.dtype}")
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be H x W x {{1,3}}, got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        return self

    @computed_field
    @property
    def height(self) -> int:
        return self.data.shape[0]

    @computed_field
    @property
    def width(self) -> int:
        return self.data.shape[1]

    @computed_field
    @property
    def channels(self) -> int:
        return self.data.shape[2]


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = 0
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}


class PatchPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    stem: str
    lr: ImageU8
    hr: ImageU8


class GradcheckResult(BaseModel):
    component: str
    max_rel_error: float = Field(..., ge=0)
    tolerance: float = Field(..., gt=0)
    checked: int = Field(..., ge=0)
    selection_stable: bool = True

    @computed_field
    @property
    def passed(self) -> bool:
        return self.selection_stable and self.max_rel_error < self.tolerance


class EvalRecord(BaseModel):
    stem: str
    psnr: float
    ssim: float


class EvalSummary(BaseModel):
    records: List[EvalRecord] = []

    @computed_field
    @property
    def mean_psnr(self) -> float:
        if not self.records:
            return float("nan")
        return sum(r.psnr for r in self.records) / len(self.records)

    @computed_field
    @property
    def mean_ssim(self) -> float:
        if not self.records:
            return float("nan")
        return sum(r.ssim for r in self.records) / len(self.records)
