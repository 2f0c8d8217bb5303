"""Patch extraction, Adam with L2 regularization, stepped LR decay and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .metrics import METRIC_NAMES, average_report, evaluate_all
from .network import Network, predict_image
from .tensor import Tape, Tensor, backward, mse_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 5e-5
    lr_gamma: float = 0.93
    lr_step: int = 10
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patch_size: int = 64
    patch_stride: int = 40
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ConfigError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if self.lr_step < 1 or self.batch_size < 1:
            raise ConfigError("lr_step and batch_size must be positive")
        if self.patch_size <= 0 or self.patch_stride <= 0:
            raise ConfigError("patch_size and patch_stride must be positive")
        if self.lr0 <= 0 or self.weight_decay < 0:
            raise ConfigError("lr0 must be positive and weight_decay non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyper-parameters")


# ---------------------------------------------------------------------------
# patches


def patch_anchors(extent: int, size: int, stride: int) -> list[int]:
    if size > extent:
        raise ShapeError(f"patch size {size} exceeds image extent {extent}")
    return list(range(0, extent - size + 1, stride))


def patch_count(height: int, width: int, size: int, stride: int) -> int:
    if size > min(height, width):
        raise ShapeError(f"patch size {size} exceeds image extent {height}x{width}")
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def extract_patches(cube, rgb, size: int, stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pixel-aligned (rgb_patch, cube_patch) pairs on a regular anchor grid."""
    c, r = np.asarray(cube), np.asarray(rgb)
    if c.shape[1:] != r.shape[1:]:
        raise ShapeError(f"cube {c.shape} and rgb {r.shape} are not pixel-aligned")
    h, w = c.shape[1:]
    ys, xs = patch_anchors(h, size, stride), patch_anchors(w, size, stride)
    return [(r[:, y:y + size, x:x + size], c[:, y:y + size, x:x + size]) for y in ys for x in xs]


# ---------------------------------------------------------------------------
# optimizer


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_gamma ** (epoch // cfg.lr_step)


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update with ``weight_decay * θ`` added to each gradient."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise NumericError(f"parameter {p.name or p.shape} has no gradient")
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# log


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    rmse1: float = math.nan
    rmse2: float = math.nan
    rrmse1: float = math.nan
    rrmse2: float = math.nan
    sam: float = math.nan


CSV_COLUMNS = ("epoch", "lr", "train_mse", "rmse1", "rmse2", "rrmse1", "rrmse2", "sam")


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch, *(repr(float(getattr(e, c))) for c in CSV_COLUMNS[1:])])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[c]) for c in CSV_COLUMNS[1:])) for r in rows])


# ---------------------------------------------------------------------------
# loop


def _stack(patches):
    x = np.stack([p[0] for p in patches]).astype(np.float32)
    y = np.stack([p[1] for p in patches]).astype(np.float32)
    return x, y


def eval_mse(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    """Eval-mode mean squared error over stacked (N, 3, h, w) / (N, 31, h, w) arrays."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        pred = net.forward(Tensor(x[i:i + batch_size].astype(net.dtype)), training=False).data
        total += float(np.sum((pred.astype(np.float64) - y[i:i + batch_size]) ** 2))
    return total / y.size


def evaluate_images(net: Network, pairs: Sequence) -> dict[str, float]:
    """Average metrics over whole (rgb, cube) images in eval mode."""
    reps = [evaluate_all(np.asarray(cube), predict_image(net, np.asarray(rgb))) for rgb, cube in pairs]
    avg = average_report(reps)
    return {n: getattr(avg, n) for n in METRIC_NAMES}


def train(
    net: Network,
    dataset: Sequence,
    cfg: TrainConfig,
    rng: np.random.Generator | int | None = None,
    test_set: Sequence | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Network, TrainLog]:
    """Fit ``net`` on (rgb, cube) image pairs cut into patches.

    Each epoch visits every patch once in a seeded shuffled order.  The
    logged ``train_mse`` is the eval-mode MSE over all training patches at
    the end of the epoch; test metrics are averaged over whole test images.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    net.rng = rng

    patches = [p for rgb, cube in dataset for p in extract_patches(cube, rgb, cfg.patch_size, cfg.patch_stride)]
    x_all, y_all = _stack(patches)
    n = len(x_all)
    params = net.parameters()
    state = AdamState()
    tlog = TrainLog()
    log.info("training on %d patches of %dx%d, %d epochs", n, cfg.patch_size, cfg.patch_size, cfg.epochs)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = Tensor(x_all[idx].astype(net.dtype, copy=False))
            yb = Tensor(y_all[idx].astype(net.dtype, copy=False))
            with Tape() as tape:
                loss = mse_loss(net.forward(xb, training=True), yb)
            if not loss.is_finite():
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {tlog.steps}")
            net.zero_grad()
            backward(tape, loss)
            adam_step(params, state, lr, cfg)
            tlog.steps += 1

        rec = EpochRecord(epoch, lr, eval_mse(net, x_all, y_all))
        if not math.isfinite(rec.train_mse):
            raise NumericError(f"non-finite training MSE after epoch {epoch}")
        if test_set:
            for k, v in evaluate_images(net, test_set).items():
                setattr(rec, k, v)
        tlog.epochs.append(rec)
        log.info("epoch %d lr %.3e train_mse %.3e rmse1 %.4f sam %.3f", epoch, lr, rec.train_mse, rec.rmse1, rec.sam)
        if on_epoch:
            on_epoch(rec)
    return net, tlog
