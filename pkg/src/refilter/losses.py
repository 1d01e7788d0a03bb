"""Stable sigmoid-family losses shared by the recall and filter models."""

from __future__ import annotations

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
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    return -softplus(-np.asarray(x, dtype=np.float64))


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def bce_with_logits(
    scores: np.ndarray, labels: np.ndarray, pos_weight: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with a positive-class weight.

    loss = -(1/N) * sum_j [ w * y_j * log s(x_j) + (1-y_j) * log(1-s(x_j)) ]

    Returns (loss, d_loss/d_scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = scores.size
    loss = -(pos_weight * labels * log_sigmoid(scores)
             + (1.0 - labels) * log_sigmoid(-scores)).sum() / n
    p = sigmoid(scores)
    d = (pos_weight * labels * (p - 1.0) + (1.0 - labels) * p) / n
    return float(loss), d


def margin_ranking_loss(
    score_pos: float, score_neg: float, margin: float
) -> tuple[float, float, float]:
    """max(s(neg) - s(pos) + margin, 0) on sigmoid probabilities.

    Returns (loss, d_loss/d_score_pos, d_loss/d_score_neg); the gradient is
    zero on the inactive side of the hinge.
    """
    p_pos = float(sigmoid(score_pos))
    p_neg = float(sigmoid(score_neg))
    raw = p_neg - p_pos + margin
    if raw <= 0.0:
        return 0.0, 0.0, 0.0
    return raw, -p_pos * (1.0 - p_pos), p_neg * (1.0 - p_neg)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
