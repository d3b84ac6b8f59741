"""Plain SGD on the synthetic orientation task."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import ModelSpec, init_weights, model_forward
from .data import synthetic_batch
from .numerics import GradTape, Tensor, cross_entropy

log = logging.getLogger(__name__)

DEFAULT_LR = 0.02
DEFAULT_BATCH = 16
DEFAULT_TRAIN_SIZE = 96


class DivergenceError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class StepLog:
    step: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    initial_loss: float
    history: list[StepLog] = field(default_factory=list)
    final_loss: float = math.nan
    final_accuracy: float = math.nan


def evaluate(params, spec: ModelSpec, images: np.ndarray, labels: np.ndarray, chunk: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a fixed set."""
    losses, correct = [], 0
    for lo in range(0, len(labels), chunk):
        logits = model_forward(Tensor(images[lo : lo + chunk]), params, spec)
        y = labels[lo : lo + chunk]
        losses.append(cross_entropy(logits, y).item() * len(y))
        correct += int((logits.data.argmax(axis=-1) == y).sum())
    return sum(losses) / len(labels), correct / len(labels)


def sgd_step(params: dict[str, Tensor], spec: ModelSpec, images: np.ndarray, labels: np.ndarray, lr: float):
    leaves = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    names = list(leaves)
    # overflow anywhere raises FloatingPointError, reported as divergence
    with np.errstate(over="raise", invalid="raise"):
        with GradTape() as tape:
            logits = model_forward(Tensor(images), leaves, spec)
            loss = cross_entropy(logits, labels)
        grads = tape.gradient(loss, [leaves[k] for k in names])
        new = {k: Tensor(params[k].data - lr * g.data) for k, g in zip(names, grads)}
    acc = float((logits.data.argmax(axis=-1) == labels).mean())
    return new, loss.item(), acc


def train_toy(
    spec: ModelSpec,
    seed: int = 0,
    steps: int = 300,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH,
    train_size: int = DEFAULT_TRAIN_SIZE,
    image_size: int = 32,
    on_step: Callable[[StepLog], None] | None = None,
) -> TrainResult:
    """Train ``spec`` from ``init_weights(spec, seed)`` on a fixed synthetic set.

    Minibatches are drawn from per-epoch permutations of the training set;
    every random choice derives from ``seed``.
    """
    kw = dict(size=image_size, patch=spec.patch_size, window=spec.window)
    images, labels = synthetic_batch(seed, range(train_size), **kw)
    params = init_weights(spec, seed)
    order_rng = np.random.default_rng([seed, 1])

    initial_loss, _ = evaluate(params, spec, images, labels)
    result = TrainResult(params=params, initial_loss=initial_loss)
    order = np.empty(0, dtype=np.int64)
    for step in range(1, steps + 1):
        if len(order) < batch_size:
            order = np.concatenate([order, order_rng.permutation(train_size)])
        idx, order = order[:batch_size], order[batch_size:]
        try:
            params, loss, acc = sgd_step(params, spec, images[idx], labels[idx], lr)
        except FloatingPointError as exc:
            raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
        entry = StepLog(step, loss, acc)
        result.history.append(entry)
        if on_step is not None:
            on_step(entry)
        log.debug("step %d loss %.4f acc %.3f", step, loss, acc)
    result.params = params
    result.final_loss, result.final_accuracy = evaluate(params, spec, images, labels)
    return result
