import numpy as np
import pytest
from pydantic import ValidationError

from models import (
    AttentionMode,
    CostReport,
    CostVariant,
    EvalRecord,
    EvalSummary,
    GradcheckResult,
    ImageU8,
    LayerOrder,
    ModelConfig,
    RegionGrid,
    RoutingResult,
)
from tensor import Tensor


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.embed_dim, cfg.window_size, cfg.scale) == (60, 8, 4)
        assert cfg.head_dim == 10
        assert cfg.mlp_hidden == 120
        assert cfg.layer_order == LayerOrder.FGCA_FIRST.value

    def test_heads_must_divide_channels(self):
        with pytest.raises(ValidationError):
            ModelConfig(embed_dim=61)

    @pytest.mark.parametrize("field,value", [("scale", 5), ("window_size", 0), ("topk_infer", 0), ("layer_order", "x")])
    def test_rejects(self, field, value):
        with pytest.raises(ValidationError):
            ModelConfig(**{field: value})

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            ModelConfig(depth=3)

    def test_micro_overrides(self):
        cfg = ModelConfig.micro(scale=3)
        assert cfg.scale == 3 and cfg.embed_dim == 8

    def test_attention_config(self):
        att = ModelConfig().attention_config(topk_infer=16)
        assert att.topk(AttentionMode.INFER) == 16
        assert att.topk(AttentionMode.TRAIN) == 32
        assert att.embed_dim == 60 and att.shift_size == 4


def test_region_grid_must_cover_map():
    with pytest.raises(ValidationError):
        RegionGrid(h_windows=2, w_windows=2, window_size=4, feature_h=9, feature_w=8)


def test_routing_rows_must_be_distinct():
    adjacency = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        RoutingResult(adjacency=adjacency, topk_indices=np.array([[0, 0], [0, 1]]), k_used=2)


def test_image_must_be_uint8():
    with pytest.raises(ValidationError):
        ImageU8(data=np.zeros((2, 2, 3)))
    with pytest.raises(ValidationError):
        ImageU8(data=np.zeros((2, 2, 4), dtype=np.uint8))


def test_cost_report_totals():
    report = CostReport(
        variant=CostVariant.OURS, height=8, width=4, channels=2, window=4, topk=1, routing_flops=3, attention_flops=5
    )
    assert report.total_flops == 8
    assert report.tokens == 32
    assert report.variant == CostVariant.OURS.value


def test_gradcheck_result_passed():
    assert GradcheckResult(component="x", max_rel_error=1e-6, tolerance=1e-4, checked=1).passed
    assert not GradcheckResult(component="x", max_rel_error=1e-6, tolerance=1e-4, checked=1, selection_stable=False).passed


def test_eval_summary_means():
    summary = EvalSummary(records=[EvalRecord(stem="a", psnr=30.0, ssim=0.8), EvalRecord(stem="b", psnr=32.0, ssim=0.9)])
    assert summary.mean_psnr == 31.0
    assert summary.mean_ssim == pytest.approx(0.85)
    assert np.isnan(EvalSummary().mean_psnr)
