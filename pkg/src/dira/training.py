"""Source-domain training with plain minibatch SGD and a plateau stop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabeledSet, batches
from .errors import ConfigError, NumericError
from .models import Model

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    epochs: int
    epoch_losses: list[float] = field(default_factory=list)
    converged: bool = False


def train(model: Model, data: LabeledSet, eta: float = 0.1, batch_size: int = 32,
          max_epochs: int = 200, tol: float = 1e-4, patience: int = 3, seed: int = 0,
          momentum: float = 0.0, lr_drops: int = 0) -> TrainReport:
    """Train in place until the best epoch loss improves by less than ``tol`` over ``patience`` epochs.

    The epoch loss is the full-set cross-entropy after each epoch. With
    ``lr_drops > 0`` a plateau first divides the learning rate by ten (up to
    ``lr_drops`` times) and only the plateau after the last drop stops training.

    Raises NumericError on a non-finite loss, naming the epoch and step.
    """
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if eta <= 0 or batch_size < 1 or max_epochs < 1:
        raise ConfigError("eta, batch_size and max_epochs must be positive")
    if not 0 <= momentum < 1:
        raise ConfigError("momentum must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    lr = np.float32(eta)
    mu = np.float32(momentum)
    velocity = {n: np.zeros_like(t.data) for n, t in model.params.items()}
    drops_left, window_start = lr_drops, 0
    report = TrainReport(epochs=0)
    for epoch in range(max_epochs):
        for step, idx in enumerate(batches(len(data), batch_size, rng)):
            model.zero_grad()
            loss = ad.softmax_cross_entropy(model(data.images[idx]), data.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
            loss.backward()
            with ad.no_grad():
                for n, t in model.params.items():
                    if momentum:
                        velocity[n] = mu * velocity[n] + t.grad
                        t.data = t.data - lr * velocity[n]
                    else:
                        t.data = t.data - lr * t.grad
        report.epoch_losses.append(dataset_loss(model, data))
        report.epochs = epoch + 1
        hist = report.epoch_losses[window_start:]
        if len(hist) > patience and min(hist[:-patience]) - min(hist[-patience:]) < tol:
            if drops_left:
                drops_left -= 1
                lr = lr * np.float32(0.1)
                window_start = len(report.epoch_losses) - 1
                log.debug("plateau at epoch %d, learning rate now %g", epoch, lr)
                continue
            report.converged = True
            break
    model.zero_grad()
    log.info("source training stopped after %d epochs, loss %.5f", report.epochs, report.epoch_losses[-1])
    return report


def dataset_loss(model: Model, data: LabeledSet, chunk: int = 512) -> float:
    """Mean cross-entropy over the whole set, without recording a graph."""
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(data), chunk):
            sl = slice(i, i + chunk)
            part = ad.softmax_cross_entropy(model(data.images[sl]), data.labels[sl]).item()
            total += part * len(data.labels[sl])
    return total / len(data)
