"""Epoch loop shared by the diffusion model and the CVAE baseline."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingError, UsageError
from .tensor import Adam

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    epochs: int = 2500
    batch_size: int = 128
    lr: float = 1e-3
    p_uncond: float = 0.1
    seed: int = 0
    checkpoint_every: int = 100

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigurationError("p_uncond must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        return self


def fit(module, batch_loss, data, labels, config, rng, on_epoch=None, optimizer=None):
    """Minimize ``batch_loss(x_batch, label_batch, rng)`` over shuffled minibatches.

    ``data`` is an array ``[N, ...]`` and ``labels`` a matching sequence.
    Returns the per-epoch average losses. ``on_epoch(epoch, avg_loss)`` runs
    after every epoch; raising from it stops training.
    """
    config.validate()
    n = len(data)
    if n == 0:
        raise UsageError("cannot train on an empty corpus")
    labels = np.asarray(labels, dtype=object)
    optimizer = optimizer or Adam(module.parameters(), lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            loss = batch_loss(data[idx], list(labels[idx]), rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += value * len(idx)
        avg = total / n
        history.append(avg)
        logger.info("epoch %d loss %.6f", epoch, avg)
        if on_epoch is not None:
            on_epoch(epoch, avg)
    return history
