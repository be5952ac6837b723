"""Mini-batch optimisation of softmax models over fixed feature matrices.

Parameters live in a plain ``dict[str, np.ndarray]`` (float64). A model is a
``loss_and_grad(params, rows)`` callable returning the mean loss on those rows
and a gradient dict for the trainable names.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_nesterov")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

LossAndGrad = Callable[[dict, np.ndarray], tuple[float, dict]]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    schedule: str = "cosine"
    epochs: int = 10
    batch_size: int = 128
    max_examples: int | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    # count epochs as single gradient steps instead of passes over the data
    steps_mode: bool = False

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_examples is not None and self.max_examples < 1:
            raise ValueError("max_examples must be positive")

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 towards zero at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def subsample_rows(n: int, cap: int | None, seed: int) -> np.ndarray:
    """Uniform seeded subsample of ``range(n)`` down to ``cap`` rows, sorted."""
    if cap is None or n <= cap:
        return np.arange(n)
    rng = np.random.default_rng([seed, 0x5EED])
    return np.sort(rng.choice(n, size=cap, replace=False))


class _Adam:
    def __init__(self, params: dict, names: list[str]) -> None:
        self.m = {k: np.zeros_like(params[k]) for k in names}
        self.v = {k: np.zeros_like(params[k]) for k in names}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class _NesterovSGD:
    def __init__(self, params: dict, names: list[str], momentum: float) -> None:
        self.buf = {k: np.zeros_like(params[k]) for k in names}
        self.momentum = momentum

    def step(self, params: dict, grads: dict, lr: float) -> None:
        mu = self.momentum
        for k, g in grads.items():
            self.buf[k] = mu * self.buf[k] + g
            params[k] = params[k] - lr * (g + mu * self.buf[k])


def optimize(
    params: dict[str, np.ndarray],
    trainable: list[str],
    loss_and_grad: LossAndGrad,
    n_rows: int,
    config: TrainConfig,
) -> list[float]:
    """Run ``config.epochs`` of mini-batch training in place on ``params``.

    Returns the full-batch training loss recorded before training and after
    every epoch. Weight decay is the gradient callable's responsibility.
    """
    history = [loss_and_grad(params, np.arange(n_rows))[0]]
    if config.epochs == 0 or not trainable:
        return history
    if config.optimizer == "adam":
        opt = _Adam(params, trainable)
    else:
        opt = _NesterovSGD(params, trainable, config.momentum)
    rng = np.random.default_rng([config.seed, 0xBA7C])
    batch = min(config.batch_size, n_rows)
    if config.steps_mode:
        steps_per_epoch = 1
    else:
        steps_per_epoch = math.ceil(n_rows / batch)
    total = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_rows)
        for start in range(0, steps_per_epoch * batch, batch):
            rows = order[start : start + batch]
            if config.schedule == "cosine":
                lr = cosine_lr(config.learning_rate, step, total)
            else:
                lr = config.learning_rate
            step += 1
            if lr == 0.0:
                continue
            _, grads = loss_and_grad(params, rows)
            opt.step(params, {k: grads[k] for k in trainable}, lr)
        loss = loss_and_grad(params, np.arange(n_rows))[0]
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        history.append(loss)
        log.debug("epoch %d loss %.6f", epoch, loss)
    return history
