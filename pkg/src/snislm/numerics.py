"""Small numerically-stable primitives shared across modules."""

from __future__ import annotations

import numpy as np

# Score outputs are confined to (CLAMP_EPS, 1 - CLAMP_EPS) inside log terms so
# that log(q) and log(1 - q) stay finite without biasing gradients at
# magnitudes a trained model actually reaches.
CLAMP_EPS = 1e-12

# exp() overflows float64 above ~709; scores fed to the exp link are capped.
_EXP_MAX = 700.0


def sigmoid(s: np.ndarray) -> np.ndarray:
    """Overflow-safe elementwise logistic function."""
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def clamped_sigmoid(s: np.ndarray) -> np.ndarray:
    """Sigmoid clipped into (CLAMP_EPS, 1 - CLAMP_EPS)."""
    return np.clip(sigmoid(s), CLAMP_EPS, 1.0 - CLAMP_EPS)


def exp_link(s: np.ndarray) -> np.ndarray:
    """exp(s) with the argument capped to avoid float64 overflow."""
    return np.exp(np.minimum(np.asarray(s, dtype=np.float64), _EXP_MAX))


def logsumexp(s: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(s, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(s - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    return s - logsumexp(s, axis=axis, keepdims=True)


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(s, axis=axis))
