"""SGD with heavy-ball momentum, step learning-rate decay, best-validation selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mlcam.autodiff import backward, no_grad
from mlcam.data import SegSample, stack_images
from mlcam.errors import ConfigError, DivergenceError
from mlcam.network import Network, batch_loss, classify_probs, forward_batch, label_indices

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    gamma: float = 0.9
    step_size: int = 500
    batch_size: int = 15
    max_iterations: int = 1000
    val_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be >= 1, got {self.step_size}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")


@dataclass
class TrainState:
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    best_val_loss: float = math.inf
    best_iteration: int = -1
    best_checkpoint: Network | None = None
    # (iteration, lr, train_loss, val_loss)
    loss_history: list[tuple[int, float, float, float]] = field(default_factory=list)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.gamma ** (iteration // cfg.step_size)


def sgd_step(net: Network, state: TrainState, lr: float, momentum: float) -> None:
    """``v <- momentum * v - lr * g``; ``p <- p + v``. Uses ``param.grad``."""
    for name, p in net.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}", state)
        v = state.velocity.get(name)
        v = -lr * g if v is None else momentum * v - lr * g
        state.velocity[name] = v
        p.data = p.data + v


def dataset_loss(net: Network, samples: Sequence[SegSample]) -> float:
    """Mean per-image total loss, evaluated in fixed-size chunks."""
    if not samples:
        raise ConfigError("cannot evaluate loss on an empty dataset")
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), EVAL_CHUNK):
            chunk = samples[start : start + EVAL_CHUNK]
            out = forward_batch(net, stack_images(chunk))
            total += batch_loss(out, label_indices([s.label for s in chunk])).item() * len(chunk)
    return total / len(samples)


def predict(net: Network, samples: Sequence[SegSample]) -> list[str]:
    labels: list[str] = []
    with no_grad():
        for start in range(0, len(samples), EVAL_CHUNK):
            chunk = samples[start : start + EVAL_CHUNK]
            labels.extend(classify_probs(forward_batch(net, stack_images(chunk)).probabilities()))
    return labels


def accuracy(net: Network, samples: Sequence[SegSample]) -> float:
    pred = predict(net, samples)
    return float(np.mean([p == s.label for p, s in zip(pred, samples)]))


def train(
    net: Network,
    train_set: Sequence[SegSample],
    val_set: Sequence[SegSample],
    cfg: TrainConfig,
) -> tuple[Network, TrainState]:
    """Train in place and return (best-validation snapshot, state).

    Mini-batches come from a seeded permutation reshuffled each epoch; the
    trailing partial batch of an epoch is dropped. No augmentation.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    if len(train_set) < cfg.batch_size:
        raise ConfigError(f"train set ({len(train_set)}) smaller than batch_size ({cfg.batch_size})")
    x_all = stack_images(train_set)
    y_all = label_indices([s.label for s in train_set])
    rng = np.random.default_rng(cfg.seed)
    per_epoch = len(train_set) // cfg.batch_size
    order = rng.permutation(len(train_set))
    cursor = 0

    state = TrainState()
    running: list[float] = []
    for it in range(cfg.max_iterations):
        if cursor == per_epoch:
            order = rng.permutation(len(train_set))
            cursor = 0
        idx = order[cursor * cfg.batch_size : (cursor + 1) * cfg.batch_size]
        cursor += 1

        lr = lr_at(it, cfg)
        net.zero_grad()
        loss = batch_loss(forward_batch(net, x_all[idx]), y_all[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"training loss became {value} at iteration {it}", state)
        backward(loss)
        sgd_step(net, state, lr, cfg.momentum)
        running.append(value)
        state.iteration = it + 1

        if state.iteration % cfg.val_every == 0 or state.iteration == cfg.max_iterations:
            val = dataset_loss(net, val_set)
            train_loss = float(np.mean(running))
            running = []
            state.loss_history.append((state.iteration, lr, train_loss, val))
            logger.info("iter %d lr %.3g train %.4f val %.4f", state.iteration, lr, train_loss, val)
            if not math.isfinite(val):
                raise DivergenceError(f"validation loss became {val} at iteration {state.iteration}", state)
            if val < state.best_val_loss:
                state.best_val_loss = val
                state.best_iteration = state.iteration
                state.best_checkpoint = net.copy()
    return state.best_checkpoint, state


HISTORY_FIELDS = ("iteration", "lr", "train_loss", "val_loss")


def write_history(path: str | Path, history: Sequence[tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for it, lr, tl, vl in history:
            w.writerow([it, repr(lr), repr(tl), repr(vl)])
