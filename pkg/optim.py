"""L1 loss, Adam and a small deterministic training loop for patch sets."""
import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from errors import ContractError, ShapeError
from models import AdamState, AttentionMode, ImageU8, ModelConfig, PatchPair, WeightStore
from network import forward, init_weights
from file_io import image_to_tensor
from tensor import Tensor, backward, clear_tape


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; d/dpred = sign(pred - target) / n with sign(0) = 0."""
    if pred.shape != target.shape:
        raise ShapeError("l1_loss operands differ in shape", pred.shape, target.shape)
    return (pred - target).abs().mean()


def adam_step(
    params: WeightStore,
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place to `params`; parameters without a gradient are skipped."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        param.data = param.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def augment_pair(
    lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator, scale: int, crop: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Same random crop / flips / 90-degree rotation for a [C,H,W] LR array and its HR mate."""
    if crop is not None:
        _, h, w = lr.shape
        if crop > min(h, w):
            raise ContractError(f"crop {crop} exceeds the {h}x{w} patch")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        lr = lr[:, top : top + crop, left : left + crop]
        hr = hr[:, top * scale : (top + crop) * scale, left * scale : (left + crop) * scale]
    if rng.random() < 0.5:
        lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
    if rng.random() < 0.5:
        lr, hr = lr[:, ::-1, :], hr[:, ::-1, :]
    turns = int(rng.integers(0, 4))
    lr, hr = np.rot90(lr, turns, axes=(1, 2)), np.rot90(hr, turns, axes=(1, 2))
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


class _PatchStream:
    """Seeded epoch-by-epoch permutation of patch indices."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size, self.rng = size, rng
        self.order: List[int] = []

    def next(self) -> int:
        if not self.order:
            self.order = self.rng.permutation(self.size).tolist()
        return self.order.pop(0)


def train_toy(
    cfg: ModelConfig,
    patches: Sequence[PatchPair],
    iters: int,
    lr: float = 2e-4,
    seed: int = 0,
    batch_size: int = 1,
    augment: bool = False,
    crop: Optional[int] = None,
    log_every: int = 50,
) -> Tuple[WeightStore, List[float]]:
    """Train a freshly initialised network with L1 + Adam; returns the weights and per-iteration losses."""
    if not patches:
        logger.error("train_toy called with no patches")
        raise ContractError("train_toy needs at least one patch pair")
    if iters < 0 or batch_size < 1:
        raise ContractError(f"iters must be >= 0 and batch_size >= 1, got {iters}, {batch_size}")
    data = [(image_to_tensor(p.lr).data, image_to_tensor(p.hr).data) for p in patches]
    for (x, y), p in zip(data, patches):
        if y.shape[1:] != (x.shape[1] * cfg.scale, x.shape[2] * cfg.scale):
            raise ShapeError(f"HR patch {p.stem} is not {cfg.scale}x its LR mate", x.shape, y.shape)

    weights = init_weights(cfg, seed)
    for t in weights.values():
        t.requires_grad = True
    rng = np.random.default_rng(seed)
    stream = _PatchStream(len(data), rng)
    state = AdamState()
    curve: List[float] = []
    for it in range(iters):
        loss = None
        for _ in range(batch_size):
            x, y = data[stream.next()]
            if augment or crop is not None:
                x, y = augment_pair(x, y, rng, cfg.scale, crop)
            term = l1_loss(forward(Tensor(x), cfg, weights, AttentionMode.TRAIN), Tensor(y))
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / batch_size)
        backward(loss)
        adam_step(weights, {name: t.grad for name, t in weights.items()}, state, lr)
        for t in weights.values():
            t.zero_grad()
        curve.append(loss.item())
        if log_every and (it + 1) % log_every == 0:
            logger.info(f"iteration {it + 1}/{iters}: L1 {curve[-1]:.5f}")
    clear_tape()
    for t in weights.values():
        t.requires_grad = False
    return weights, curve


def synthetic_patches(n: int, lr_size: int = 32, scale: int = 2, seed: int = 0, channels: int = 3) -> List[PatchPair]:
    """Smooth random colour fields; HR is rendered, LR is its scale x scale box average."""
    if n < 1 or lr_size < 1:
        raise ContractError(f"need n >= 1 and lr_size >= 1, got {n}, {lr_size}")
    rng = np.random.default_rng(seed)
    hr_size = lr_size * scale
    yy, xx = np.meshgrid(np.linspace(0, 1, hr_size), np.linspace(0, 1, hr_size), indexing="ij")
    pairs = []
    for i in range(n):
        field = np.zeros((hr_size, hr_size, channels))
        for c in range(channels):
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                field[:, :, c] += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        field -= field.min()
        field /= max(field.max(), 1e-12)
        hr = np.round(field * 255.0).astype(np.uint8)
        lr = hr.reshape(lr_size, scale, lr_size, scale, channels).mean(axis=(1, 3))
        pairs.append(
            PatchPair(
                stem=f"patch{i:03d}",
                lr=ImageU8(data=np.round(lr).astype(np.uint8)),
                hr=ImageU8(data=hr),
            )
        )
    logger.debug(f"generated {n} synthetic {lr_size}x{lr_size} patches at x{scale}")
    return pairs


def write_loss_csv(curve: Sequence[float], path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, value in enumerate(curve):
            writer.writerow([i, repr(float(value))])
    logger.info(f"wrote {len(curve)} loss values to {path}")
