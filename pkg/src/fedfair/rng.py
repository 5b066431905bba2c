"""Deterministic random streams.

Every stochastic step in the simulator draws from its own stream keyed by
(seed, *path) where the path encodes what the stream is for (e.g. layer
index, client id, round). Identical keys give identical sequences; distinct
keys give statistically independent ones, so clients can be trained in any
order (or concurrently) without changing results.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

# Path roots, one per consumer, so streams never collide across subsystems.
INIT = 0  # model weight initialization, per layer
SPLIT = 1  # train/val/test splitting
REBALANCE = 2  # minority-class oversampling, per client
LOCAL = 3  # in-FL local updates, per (client, round)
SELECT = 4  # client subsampling, per round
FINETUNE = 5  # post-FL fine-tuning, per client
DATA = 6  # synthetic data generation


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for stream (seed, *path)."""
    for part in (seed, *path):
        if part < 0:
            raise ValidationError(f"stream keys must be nonnegative, got {part}")
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))
