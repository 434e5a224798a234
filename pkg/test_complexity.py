import csv

import pytest

from complexity import (
    find_crossover,
    flops_ours,
    flops_prev,
    measured_attention_flops,
    parse_grid,
    peak_attention_memory,
    sweep_costs,
    write_cost_csv,
)
from errors import ContractError
from models import CostGridPoint, CostVariant, ModelConfig

DEFAULT_GRID = "32x32,64x64,128x128,256x256,512x512"


class TestClosedForms:
    def test_equal_layouts_cost_the_same(self):
        prev = flops_prev(64, 64, 64, side=8, topk=4)
        ours = flops_ours(64, 64, 64, window=8, topk=4)
        assert prev.routing_flops == ours.routing_flops == 524288
        assert prev.attention_flops == ours.attention_flops == 134217728

    def test_single_region_is_dense_attention(self):
        report = flops_ours(8, 8, 60, window=8, topk=4)
        assert report.topk == 1
        assert report.routing_flops == 120
        assert report.attention_flops == 2 * 64 * 64 * 60

    def test_ours_counts_padded_windows(self):
        assert flops_ours(9, 9, 4, window=8, topk=1).routing_flops == 2 * 16 * 4

    def test_prev_needs_divisible_map(self):
        with pytest.raises(ContractError):
            flops_prev(10, 10, 4, side=3, topk=1)

    @pytest.mark.parametrize("kwargs", [dict(height=0), dict(channels=0), dict(topk=0)])
    def test_positive_dimensions(self, kwargs):
        args = dict(height=8, width=8, channels=4, window=4, topk=1)
        args.update(kwargs)
        with pytest.raises(ContractError):
            flops_ours(**args)

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_ours_attention_is_linear_in_tokens(self, size):
        base = flops_ours(size, size, 60, 8, 16).attention_flops
        assert flops_ours(size, 2 * size, 60, 8, 16).attention_flops == 2 * base
        assert flops_ours(2 * size, 2 * size, 60, 8, 16).attention_flops == 4 * base

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_prev_attention_is_quadratic_in_tokens(self, size):
        base = flops_prev(size, size, 60, 8, 4).attention_flops
        assert flops_prev(2 * size, 2 * size, 60, 8, 4).attention_flops == 16 * base

    @pytest.mark.parametrize("topk", [1, 4, 16])
    def test_prev_attention_is_linear_in_topk(self, topk):
        single = flops_prev(64, 64, 60, 8, topk).attention_flops
        assert flops_prev(64, 64, 60, 8, 2 * topk).attention_flops == 2 * single

    def test_ours_grows_with_resolution(self):
        totals = [flops_ours(s, s, 60, 8, 64).total_flops for s in (32, 64, 128, 256, 512)]
        assert totals == sorted(totals)
        assert len(set(totals)) == len(totals)


class TestMemory:
    def test_one_window_matches_one_region(self):
        ours = peak_attention_memory(CostVariant.OURS, 8, 8, 60, 8, 4)
        prev = peak_attention_memory(CostVariant.PREV, 8, 8, 60, 1, 4)
        assert ours == prev

    @pytest.mark.parametrize("topk", [4, 64])
    def test_prev_over_ours_at_512(self, topk):
        prev = peak_attention_memory(CostVariant.PREV, 512, 512, 60, 8, topk)
        ours = peak_attention_memory(CostVariant.OURS, 512, 512, 60, 8, topk)
        assert prev / ours >= 4
        assert prev / ours == pytest.approx(33.5, abs=0.05)

    @pytest.mark.parametrize("variant,side", [(CostVariant.OURS, 8), (CostVariant.PREV, 8)])
    def test_tiling_never_costs_more(self, variant, side):
        for size in (64, 256, 512):
            untiled = peak_attention_memory(variant, size, size, 60, side, 64)
            tiled = peak_attention_memory(variant, size, size, 60, side, 64, tiled=True)
            assert tiled <= untiled

    def test_bytes_per_scalar_scales_linearly(self):
        four = peak_attention_memory(CostVariant.OURS, 64, 64, 60, 8, 16, bytes_per_scalar=4)
        eight = peak_attention_memory(CostVariant.OURS, 64, 64, 60, 8, 16, bytes_per_scalar=8)
        assert eight == 2 * four


class TestMeasured:
    def test_hand_computed_count(self):
        assert measured_attention_flops(ModelConfig(topk_infer=4), 64, 64) == 126_320_640

    @pytest.mark.parametrize("topk", [4, 16])
    def test_matches_closed_form(self, topk):
        measured = measured_attention_flops(ModelConfig(topk_infer=topk), 64, 64)
        assert measured == flops_ours(64, 64, 60, 8, topk).total_flops

    def test_near_linear_in_tokens(self):
        cfg = ModelConfig(topk_infer=4)
        ratio = measured_attention_flops(cfg, 64, 128) / measured_attention_flops(cfg, 64, 64)
        assert 2.0 < ratio < 2.01


class TestSweep:
    def test_default_grid_crossover(self):
        rows = sweep_costs(parse_grid(DEFAULT_GRID))
        assert len(rows) == 10
        assert [r.variant for r in rows[:2]] == [CostVariant.PREV.value, CostVariant.OURS.value]
        assert find_crossover(rows) == 16384

    def test_no_crossover_when_ours_never_wins(self):
        rows = [flops_prev(64, 64, 64, 8, 4), flops_ours(64, 64, 64, 8, 4)]
        assert find_crossover(rows) is None

    def test_single_variant(self):
        rows = sweep_costs(parse_grid("64x64"), variants=(CostVariant.OURS,))
        assert len(rows) == 1

    def test_parse_grid_keeps_base_fields(self):
        base = CostGridPoint(height=1, width=1, channels=32, topk=16)
        points = parse_grid("16x32, 64X64", base)
        assert [(p.height, p.width) for p in points] == [(16, 32), (64, 64)]
        assert all(p.channels == 32 and p.topk == 16 for p in points)

    @pytest.mark.parametrize("spec", ["", "64", "64x", "0x64", "axb", "64x64,"])
    def test_parse_grid_rejects(self, spec):
        with pytest.raises(ValueError):
            parse_grid(spec)

    def test_csv(self, tmp_path):
        out = tmp_path / "costs.csv"
        write_cost_csv(sweep_costs(parse_grid("64x64"), tiled=True), out)
        with out.open() as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert rows[0]["variant"] == CostVariant.PREV.value
        assert rows[1]["total_flops"] == "2013757440"
        assert rows[0]["tiled"] == "1"
