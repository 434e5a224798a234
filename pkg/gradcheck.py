"""Finite-difference verification suites for the tensor engine, the attention layers and the network.

Each suite builds a scalar loss sum(f(x) * R) with a fixed random R, runs one
backward pass and compares every requested gradient with central differences.
"""
from typing import Callable, Dict, List

import numpy as np
from loguru import logger

from attention import AttentionWeights, fgca_windows, window_attention
from models import AttentionConfig, AttentionMode, GradcheckResult, ModelConfig
from network import forward, init_weights
from tensor import Tensor, backward, conv2d, finite_diff_grad, gelu, gradient_error, layer_norm, matmul, softmax_lastdim
from windowing import partition_windows

ATTENTION_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
FD_EPS = 1e-5


def _numeric(loss_fn: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    original = t.data

    def probe(x: Tensor) -> Tensor:
        t.data = x.data
        try:
            return loss_fn()
        finally:
            t.data = original

    return finite_diff_grad(probe, t, eps).data


def compare_gradients(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor], eps: float = FD_EPS) -> Dict[str, float]:
    """Relative error between backward() and central differences for each named tensor."""
    for t in tensors.values():
        t.requires_grad = True
        t.zero_grad()
    backward(loss_fn())
    analytic = {name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad = False
        t.zero_grad()
    errors = {}
    for name, t in tensors.items():
        errors[name] = gradient_error(analytic[name], _numeric(loss_fn, t, eps))
        logger.debug(f"{name}: max relative error {errors[name]:.2e}")
    return errors


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: (y * r).sum()


def _attention_weights(channels: int, rng: np.random.Generator, bias_table: int = 0, heads: int = 1) -> AttentionWeights:
    def w(*shape):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(channels), shape))

    return AttentionWeights(
        q_weight=w(channels, channels),
        k_weight=w(channels, channels),
        v_weight=w(channels, channels),
        proj_weight=w(channels, channels),
        q_bias=w(channels),
        k_bias=w(channels),
        v_bias=w(channels),
        proj_bias=w(channels),
        position_bias=Tensor(rng.normal(0.0, 0.1, (bias_table, heads))) if bias_table else None,
    )


def _weight_tensors(weights: AttentionWeights) -> Dict[str, Tensor]:
    return {name: t for name, t in weights if isinstance(t, Tensor)}


def check_tensor_ops(seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    img = Tensor(rng.normal(size=(2, 5, 5)))
    kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
    bias = Tensor(rng.normal(size=3))
    cases = {
        "matmul": (lambda: matmul(a, b), {"a": a, "b": b}),
        "softmax": (lambda: softmax_lastdim(a), {"x": a}),
        "layer_norm": (lambda: layer_norm(a, gamma, beta), {"x": a, "gamma": gamma, "beta": beta}),
        "gelu": (lambda: gelu(a), {"x": a}),
        "conv2d": (lambda: conv2d(img, kernel, bias, stride=1, pad=1), {"x": img, "w": kernel, "b": bias}),
        "conv2d_stride2": (lambda: conv2d(img, kernel, None, stride=2, pad=1), {"x": img, "w": kernel}),
    }
    worst, checked = 0.0, 0
    for op, (fn, tensors) in cases.items():
        reduce = _projected(fn(), rng)
        errors = compare_gradients(lambda: reduce(fn()), tensors)
        worst = max(worst, *errors.values())
        checked += sum(t.size for t in tensors.values())
        logger.debug(f"{op}: {max(errors.values()):.2e}")
    return GradcheckResult(component="tensor_ops", max_rel_error=worst, tolerance=ATTENTION_TOLERANCE, checked=checked)


def check_fgca(seed: int = 0, size: int = 8, channels: int = 8, window: int = 4, topk: int = 2, heads: int = 2) -> GradcheckResult:
    """FGCA on one feature map with k < n_regions; also asserts every probe keeps the base routing."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(window_size=window, num_heads=heads, head_dim=channels // heads, topk_train=topk, topk_infer=topk)
    x = Tensor(rng.normal(size=(size, size, channels)))
    weights = _attention_weights(channels, rng)
    base = fgca_windows(partition_windows(x, window)[0], cfg, weights, AttentionMode.TRAIN)[1].topk_indices.copy()
    stable = [True]

    def run() -> Tensor:
        out, routing = fgca_windows(partition_windows(x, window)[0], cfg, weights, AttentionMode.TRAIN)
        if not np.array_equal(routing.topk_indices, base):
            stable[0] = False
        return out

    reduce = _projected(run(), rng)
    tensors = {"x": x, **_weight_tensors(weights)}
    errors = compare_gradients(lambda: reduce(run()), tensors)
    if not stable[0]:
        logger.warning("top-k selection changed under a finite-difference probe")
    return GradcheckResult(
        component="fgca",
        max_rel_error=max(errors.values()),
        tolerance=ATTENTION_TOLERANCE,
        checked=sum(t.size for t in tensors.values()),
        selection_stable=stable[0],
    )


def check_window_attention(seed: int = 0, size: int = 8, channels: int = 8, window: int = 4, heads: int = 2) -> GradcheckResult:
    """Shifted window attention with a relative position bias table."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(window_size=window, num_heads=heads, head_dim=channels // heads)
    x = Tensor(rng.normal(size=(size, size, channels)))
    weights = _attention_weights(channels, rng, bias_table=(2 * window - 1) ** 2, heads=heads)

    def run() -> Tensor:
        return window_attention(x, cfg, weights, shift=cfg.shift_size)

    reduce = _projected(run(), rng)
    tensors = {"x": x, **_weight_tensors(weights)}
    errors = compare_gradients(lambda: reduce(run()), tensors)
    return GradcheckResult(
        component="window_attention",
        max_rel_error=max(errors.values()),
        tolerance=ATTENTION_TOLERANCE,
        checked=sum(t.size for t in tensors.values()),
    )


def check_network(seed: int = 0, size: int = 8, cfg: ModelConfig = None) -> GradcheckResult:
    """Every parameter and the input of the micro network against central differences."""
    cfg = cfg or ModelConfig.micro()
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed)
    # Move biases and gains off their init values.
    for t in weights.values():
        t.data = t.data + rng.normal(0.0, 0.05, t.shape)
    x = Tensor(rng.uniform(0.0, 1.0, (cfg.in_channels, size, size)))

    def run() -> Tensor:
        return forward(x, cfg, weights, AttentionMode.TRAIN)

    reduce = _projected(run(), rng)
    tensors = {"input": x, **weights}
    errors = compare_gradients(lambda: reduce(run()), tensors)
    worst = max(errors, key=errors.get)
    logger.debug(f"network: worst tensor {worst} ({errors[worst]:.2e})")
    return GradcheckResult(
        component="network",
        max_rel_error=errors[worst],
        tolerance=NETWORK_TOLERANCE,
        checked=sum(t.size for t in tensors.values()),
    )


SUITES = {
    "tensor_ops": check_tensor_ops,
    "fgca": check_fgca,
    "window_attention": check_window_attention,
    "network": check_network,
}


def run_all(seed: int = 0) -> List[GradcheckResult]:
    results = []
    for name, suite in SUITES.items():
        logger.info(f"gradient check: {name}")
        result = suite(seed=seed)
        logger.info(
            f"{name}: max relative error {result.max_rel_error:.3e} "
            f"(tolerance {result.tolerance:g}) {'PASS' if result.passed else 'FAIL'}"
        )
        results.append(result)
    return results
