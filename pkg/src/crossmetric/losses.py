"""Contrastive, triplet, and pairwise-softmax cross-entropy losses.

Every loss accepts one sample (1-D vectors) or a batch (2-D, one sample per
row), averages over the batch, and returns the value together with the
gradient for each input.  Hinges use subgradient 0 exactly at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import ShapeError

PROB_FLOOR = 1e-12
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)


class LossValue(NamedTuple):
    value: float
    grads: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class Margins:
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lam", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"margin {name} must be positive")


def _as_batch(*arrays: np.ndarray) -> tuple[bool, list[np.ndarray]]:
    arrs = [np.asarray(a, dtype=np.float64) for a in arrays]
    single = arrs[0].ndim == 1
    arrs = [a.reshape(1, -1) if single else a for a in arrs]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeError(f"input shapes differ: {shape} vs {a.shape}")
    return single, arrs


def _unbatch(single: bool, grads: list[np.ndarray]) -> tuple[np.ndarray, ...]:
    return tuple(g[0] if single else g for g in grads)


def contrastive_loss(f_img, f_txt, same_label, lam: float = 1.0) -> LossValue:
    """Squared distance for same-label pairs, squared hinge ``max(0, lam - d)^2`` otherwise."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    single, (u, v) = _as_batch(f_img, f_txt)
    same = np.broadcast_to(np.asarray(same_label, dtype=bool), (u.shape[0],))
    n = u.shape[0]
    diff = u - v
    d2 = np.einsum("ij,ij->i", diff, diff)
    d = np.sqrt(d2)

    hinge = np.maximum(lam - d, 0.0)
    per_sample = np.where(same, d2, hinge**2)
    # d/du of (lam - d)^2 is -2 (lam - d) (u - v) / d; zero inside the margin or at d == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        push = np.where((hinge > 0) & (d > 0), -2.0 * hinge / d, 0.0)
    coef = np.where(same, 2.0, push) / n
    gu = coef[:, None] * diff
    return LossValue(float(per_sample.mean()), _unbatch(single, [gu, -gu]))


def triplet_loss(anchor, positive, negative, margin: float = 1.0) -> LossValue:
    """``max(0, |a - p|^2 - |a - n|^2 + margin)`` averaged over triplets."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    single, (a, p, q) = _as_batch(anchor, positive, negative)
    n = a.shape[0]
    ap = a - p
    aq = a - q
    arg = np.einsum("ij,ij->i", ap, ap) - np.einsum("ij,ij->i", aq, aq) + margin
    active = (arg > 0).astype(np.float64)[:, None] * (2.0 / n)
    ga = active * (q - p)
    gp = -active * ap
    gq = active * aq
    return LossValue(float(np.maximum(arg, 0.0).mean()), _unbatch(single, [ga, gp, gq]))


def softmax_pair(h0, h1):
    """Probability of the "same class" node, ``e^h1 / (e^h0 + e^h1)``.

    Results are kept strictly inside (0, 1) in floating point.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    h1 = np.asarray(h1, dtype=np.float64)
    m = np.maximum(h0, h1)
    e0 = np.exp(h0 - m)
    e1 = np.exp(h1 - m)
    p = np.clip(e1 / (e0 + e1), _TINY, _ONE_MINUS)
    return float(p) if p.ndim == 0 else p


def cross_entropy(p_hat, labels) -> LossValue:
    """Mean binary cross-entropy of predicted ``p_hat`` against 0/1 ``labels``.

    ``p_hat`` is clamped to ``[1e-12, 1 - 1e-12]`` before the logarithms; the
    gradient is taken with respect to ``p_hat``.
    """
    p_hat = np.atleast_1d(np.asarray(p_hat, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if p_hat.shape != y.shape:
        raise ShapeError(f"p_hat {p_hat.shape} vs labels {y.shape}")
    if not np.all(np.isfinite(p_hat)) or np.any((p_hat < 0) | (p_hat > 1)):
        raise FloatingPointError("p_hat must lie in [0, 1]")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    n = p_hat.size
    q = np.clip(p_hat, PROB_FLOOR, 1.0 - PROB_FLOOR)
    value = -np.mean(y * np.log(q) + (1 - y) * np.log(1 - q))
    grad = -(y / q - (1 - y) / (1 - q)) / n
    return LossValue(float(value), (grad,))


def softmax_cross_entropy(h0, h1, labels) -> LossValue:
    """Cross-entropy of ``softmax_pair(h0, h1)`` against 0/1 labels.

    Computed through log-sum-exp so large logits neither overflow nor clamp.
    Gradients are with respect to ``h0`` and ``h1``.
    """
    h0 = np.atleast_1d(np.asarray(h0, dtype=np.float64))
    h1 = np.atleast_1d(np.asarray(h1, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if not (h0.shape == h1.shape == y.shape):
        raise ShapeError("h0, h1 and labels must have the same shape")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    n = y.size
    lse = np.logaddexp(h0, h1)
    value = np.mean(lse - (y * h1 + (1 - y) * h0))
    m = np.maximum(h0, h1)
    e0 = np.exp(h0 - m)
    e1 = np.exp(h1 - m)
    p = e1 / (e0 + e1)
    g1 = (p - y) / n
    return LossValue(float(value), (-g1, g1))
