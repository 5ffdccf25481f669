"""Training loop: adaptive moments with decoupled weight decay.

The decay step multiplies weights by (1 - weight_decay) independently of the
learning rate, so a zero-learning-rate run still shrinks weights by exactly
the decay factor each update.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..errmodel import RngStream


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    weight_decay: float
    seed: int

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class AdamW:
    def __init__(self, params: dict, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.wd:
                p *= 1.0 - self.wd
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def train(model, dataset, cfg: TrainConfig, loss: str):
    """Train in place; returns the per-epoch mean loss curve."""
    if not dataset:
        raise ValueError("empty dataset")
    opt = AdamW(model.params, cfg.learning_rate, cfg.weight_decay)
    n = len(dataset)
    curve = []
    for epoch in range(cfg.epochs):
        order = RngStream(cfg.seed, ("shuffle", epoch)).generator.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = model.collate([dataset[i] for i in idx])
            li, grads = model.loss_and_grads(batch, loss)
            if not np.isfinite(li):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
            opt.step(model.params, grads)
            losses.append(li)
        curve.append((epoch, float(np.mean(losses))))
    if hasattr(model, "invalidate_qweights"):
        model.invalidate_qweights()
    return curve


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        w.writerows(curve)
