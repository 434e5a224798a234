import numpy as np
import pytest
from loguru import logger

from errors import ContractError, MissingWeightError, ShapeError
from gradcheck import check_network
from models import AttentionMode, LayerOrder, ModelConfig
from network import (
    count_params,
    fgca_block_forward,
    first_fgca_routing,
    forward,
    init_weights,
    layer_sequence,
    parameter_shapes,
    pixel_shuffle,
    pixel_unshuffle,
    reconstruct,
    shallow_extract,
    sscan_block_forward,
    validate_weights,
)
from tensor import Tensor


@pytest.fixture(scope="module")
def micro():
    return ModelConfig.micro()


@pytest.fixture(scope="module")
def micro_weights(micro):
    return init_weights(micro, seed=0)


def lr_image(cfg, h, w, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0.0, 1.0, (cfg.in_channels, h, w)))


class TestParameterCounts:
    def test_default_configuration(self):
        assert count_params(ModelConfig()) == 918588

    @pytest.mark.parametrize("scale,reference", [(2, 911_000), (3, 919_000), (4, 931_000)])
    def test_within_five_percent_of_reference_sizes(self, scale, reference):
        assert abs(count_params(ModelConfig(scale=scale)) - reference) / reference < 0.05

    def test_micro(self, micro):
        assert count_params(micro) == 4264

    def test_conv_parameter_shapes(self):
        # a 3x3 conv carries 9 weights per input/output channel pair plus one bias per output
        shapes = parameter_shapes(ModelConfig.micro(in_channels=1, embed_dim=2, num_heads=1))
        assert np.prod(shapes["shallow.weight"]) + np.prod(shapes["shallow.bias"]) == 2 * 9 + 2
        assert shapes["recon.conv.weight"] == (4, 2, 3, 3)

    def test_position_bias_only_on_window_layers(self, micro):
        shapes = parameter_shapes(micro)
        assert shapes["sscan.0.fgca.0.wa.attn.position_bias"] == (49, 2)
        assert "sscan.0.fgca.0.fgca.attn.position_bias" not in shapes

    def test_no_qkv_bias(self):
        with_bias = count_params(ModelConfig.micro())
        without = count_params(ModelConfig.micro(qkv_bias=False))
        assert with_bias - without == 3 * 3 * 8


class TestInit:
    def test_deterministic(self, micro):
        a, b = init_weights(micro, seed=3), init_weights(micro, seed=3)
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_seed_matters(self, micro):
        a, b = init_weights(micro, seed=1), init_weights(micro, seed=2)
        assert not np.array_equal(a["shallow.weight"].data, b["shallow.weight"].data)

    def test_distributions(self, micro_weights):
        linear = micro_weights["sscan.0.fgca.0.fgca.attn.q.weight"].data
        assert np.abs(linear).max() <= 0.04
        for name, t in micro_weights.items():
            if name.endswith(".bias") or name.endswith(".beta"):
                assert not t.data.any(), name
            if name.endswith(".gamma"):
                assert np.all(t.data == 1.0), name

    def test_order_matches_shapes(self, micro, micro_weights):
        assert list(micro_weights) == list(parameter_shapes(micro))


class TestValidateWeights:
    def test_accepts_fresh_weights(self, micro, micro_weights):
        validate_weights(micro_weights, micro)

    def test_missing(self, micro):
        store = init_weights(micro)
        del store["deep.conv.bias"]
        with pytest.raises(MissingWeightError) as excinfo:
            validate_weights(store, micro)
        assert excinfo.value.name == "deep.conv.bias"

    def test_wrong_shape(self, micro):
        store = init_weights(micro)
        store["deep.conv.bias"] = Tensor(np.zeros(9))
        with pytest.raises(ShapeError):
            validate_weights(store, micro)

    def test_unexpected(self, micro):
        store = init_weights(micro)
        store["extra"] = Tensor(np.zeros(1))
        with pytest.raises(ContractError):
            validate_weights(store, micro)

    def test_forward_reports_missing_weight(self, micro):
        store = init_weights(micro)
        del store["sscan.0.fgca.0.swa.mlp.fc2.weight"]
        with pytest.raises(MissingWeightError):
            forward(lr_image(micro, 8, 8), micro, store)


class TestPixelShuffle:
    def test_single_pixel(self):
        out = pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)), 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_unshuffle_inverts(self, scale):
        x = Tensor(np.random.default_rng(scale).normal(size=(2 * scale * scale, 3, 5)))
        shuffled = pixel_shuffle(x, scale)
        assert shuffled.shape == (2, 3 * scale, 5 * scale)
        np.testing.assert_array_equal(pixel_unshuffle(shuffled, scale).data, x.data)

    def test_channels_must_divide(self):
        with pytest.raises(ShapeError):
            pixel_shuffle(Tensor(np.ones((5, 2, 2))), 2)


class TestForward:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    @pytest.mark.parametrize("h,w", [(17, 23), (32, 32)])
    def test_output_shape(self, h, w, scale):
        cfg = ModelConfig.micro(scale=scale)
        out = forward(lr_image(cfg, h, w), cfg, init_weights(cfg))
        assert out.shape == (3, scale * h, scale * w)
        assert np.all(np.isfinite(out.data))

    def test_deterministic(self, micro, micro_weights):
        x = lr_image(micro, 12, 9)
        np.testing.assert_array_equal(forward(x, micro, micro_weights).data, forward(x, micro, micro_weights).data)

    def test_warns_once_about_padding_and_clamped_topk(self, micro, micro_weights):
        messages = []
        sink = logger.add(messages.append, level="WARNING", format="{message}")
        try:
            forward(lr_image(micro, 6, 6), micro, micro_weights, AttentionMode.TRAIN)
            forward(lr_image(micro, 8, 8), micro, micro_weights, AttentionMode.INFER)
        finally:
            logger.remove(sink)
        assert len(messages) == 2
        assert "reflect-padding by (2, 2)" in messages[0]
        assert "top-k 8 clamped to the 4 regions" in messages[1]

    def test_rejects_wrong_channel_count(self, micro, micro_weights):
        with pytest.raises(ShapeError):
            forward(Tensor(np.ones((1, 8, 8))), micro, micro_weights)

    def test_zero_deep_conv_leaves_shallow_features(self, micro):
        weights = init_weights(micro, seed=4)
        weights["deep.conv.weight"].data = np.zeros(weights["deep.conv.weight"].shape)
        x = lr_image(micro, 8, 8)
        expected = reconstruct(shallow_extract(x, weights), micro.scale, weights)
        np.testing.assert_allclose(forward(x, micro, weights).data, expected.data, atol=1e-12)

    def test_zeroed_residual_branches_make_identity_blocks(self, micro):
        weights = init_weights(micro, seed=5)
        for name, t in weights.items():
            if name.endswith(("attn.proj.weight", "mlp.fc2.weight", "sscan.0.conv.weight")):
                t.data = np.zeros(t.shape)
        x = np.random.default_rng(6).normal(size=(8, 8, micro.embed_dim))
        out = fgca_block_forward(Tensor(x), micro, weights, AttentionMode.INFER)
        np.testing.assert_allclose(out.data, x, atol=1e-12)
        chw = Tensor(x.transpose(2, 0, 1))
        np.testing.assert_allclose(sscan_block_forward(chw, micro, weights, AttentionMode.INFER).data, chw.data)

    def test_layer_orders_differ(self):
        x = lr_image(ModelConfig.micro(), 8, 8)
        outputs = []
        for order in LayerOrder:
            cfg = ModelConfig.micro(layer_order=order)
            outputs.append(forward(x, cfg, init_weights(cfg, seed=7)).data)
        assert not np.allclose(outputs[0], outputs[1])
        assert layer_sequence(ModelConfig.micro(layer_order=LayerOrder.WA_ONLY))[-1].value == "swa"

    @pytest.mark.parametrize("window,topk", [(4, 256), (8, 64)])
    def test_window_and_topk_settings(self, window, topk):
        cfg = ModelConfig.micro(window_size=window, topk_infer=topk)
        assert forward(lr_image(cfg, 32, 32), cfg, init_weights(cfg)).shape == (3, 64, 64)

    def test_train_and_infer_modes_differ(self):
        cfg = ModelConfig.micro(topk_train=1, topk_infer=16)
        weights = init_weights(cfg, seed=8)
        x = lr_image(cfg, 16, 16)
        train = forward(x, cfg, weights, AttentionMode.TRAIN).data
        infer = forward(x, cfg, weights, AttentionMode.INFER).data
        assert not np.allclose(train, infer)


class TestFirstRouting:
    def test_k_used(self, micro, micro_weights):
        routing, grid = first_fgca_routing(lr_image(micro, 16, 16), micro, micro_weights)
        assert grid.n_regions == 16
        assert routing.k_used == 8
        assert routing.topk_indices.shape == (16, 8)

    def test_wa_only_has_no_routing(self):
        cfg = ModelConfig.micro(layer_order=LayerOrder.WA_ONLY)
        with pytest.raises(ContractError):
            first_fgca_routing(lr_image(cfg, 8, 8), cfg, init_weights(cfg))


@pytest.mark.slow
def test_network_gradients():
    result = check_network(seed=0)
    assert result.passed, result
