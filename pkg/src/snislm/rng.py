"""Deterministic counter-based random streams."""

from __future__ import annotations

import numpy as np


def stream_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream addressed by (seed, *path).

    Streams for distinct paths never overlap, so per-(epoch, batch) sampling is
    reproducible regardless of thread scheduling or evaluation order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *path])))
