"""Learning-to-rank training objectives and their score gradients.

Point-wise (soft-label cross-entropy and MSE), pair-wise (sigmoid over
score differences with binary cross-entropy) and list-wise (softmax
cross-entropy over the channel list). Every loss returns both its value
and the analytic gradient with respect to the network scores; the
gradients are what the trainer backpropagates through the ranker.

All losses are non-negative and minimized. Log-probabilities are
evaluated through softplus / max-subtracted log-sum-exp so that extreme
scores stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """ln(1 + e^x), overflow-safe."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def pointwise_xce(w, f, single_term: bool = False):
    """Soft-label binary cross-entropy of sigmoid(f) against w in [0, 1].

    loss = -[w ln s(f) + (1-w) ln(1-s(f))], dloss/df = s(f) - w.

    ``single_term=True`` keeps only the -w ln s(f) term. That variant is
    degenerate as a ranking objective (its minimum pushes s(f) to 0 for
    every w < 1); it exists for fidelity experiments only.
    """
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any((w < 0.0) | (w > 1.0)):
        raise ValueError("pointwise_xce requires relevance w in [0, 1]")
    s = sigmoid(f)
    if single_term:
        loss = w * softplus(-f)
        grad = -w * (1.0 - s)
    else:
        loss = w * softplus(-f) + (1.0 - w) * softplus(f)
        grad = s - w
    return loss, grad


def pointwise_mse(w, f):
    """Squared error (w - f)^2 with gradient 2 (f - w)."""
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    diff = f - w
    return diff * diff, 2.0 * diff


def pairwise_label(w_i, w_j):
    """Hard pair label: 1 where w_i > w_j, else 0 (ties give 0)."""
    return np.where(np.asarray(w_i) > np.asarray(w_j), 1.0, 0.0)


@dataclass
class PairSet:
    """Index pairs (i, j), i < j, whose relevance gap exceeds delta."""

    pairs: list[tuple[int, int]]
    delta: float

    def __len__(self) -> int:
        return len(self.pairs)


def build_pair_set(w, delta: float = 0.0) -> PairSet:
    """All unordered channel pairs with |w_i - w_j| > delta.

    Emitted as (i, j) with i < j; at most M (M - 1) / 2 pairs.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    w = np.asarray(w, dtype=np.float64)
    m = len(w)
    pairs = [
        (i, j)
        for i in range(m)
        for j in range(i + 1, m)
        if abs(w[i] - w[j]) > delta
    ]
    return PairSet(pairs=pairs, delta=float(delta))


def ranknet_loss(f_i, f_j, y):
    """Pair-wise cross-entropy on P(i beats j) = sigmoid(f_i - f_j).

    Returns (loss, dloss/df_i, dloss/df_j); the two score gradients are
    exact negatives of each other.
    """
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("ranknet labels must be 0 or 1")
    d = f_i - f_j
    loss = softplus(d) - y * d
    g = sigmoid(d) - y
    return loss, g, -g


def listnet_loss(w, f):
    """List-wise cross-entropy between softmax(w) and softmax(f).

    loss = -sum_i p_i ln q_i with p = softmax(w), q = softmax(f);
    gradient with respect to f is q - p. Adding a constant to every score
    leaves both the loss and the gradient unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if w.shape[-1] < 2:
        raise ValueError("listnet_loss needs at least 2 channels")
    p = softmax(w, axis=-1)
    log_q = log_softmax(f, axis=-1)
    loss = -np.sum(p * log_q, axis=-1)
    # same softmax code path for both terms so grad is exactly 0 at f == w
    grad = softmax(f, axis=-1) - p
    return loss, grad
