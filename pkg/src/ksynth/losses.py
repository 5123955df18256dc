"""Training objectives: the two fusion regularisers, cross-entropy, and the
weighted total.

The interaction loss rewards l1 mass in every routing entry (squashed by a
sigmoid so weights cannot explode); the capacity loss penalises cosine
similarity between the pooled output groups.  Both are single tape ops with
hand-derived gradients, finite-difference checked in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .fusion import FusionMatrix
from .tensor import Tensor5, Tracked, result_of

COSINE_EPS = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.01  # interaction weight
    beta: float = 0.001  # capacity weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise UsageError(f"loss weights must be >= 0, got {self}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def interaction_loss(fm: FusionMatrix) -> Tracked:
    """-(1/G^2) * sum_ij sigmoid(||T_ij||_1); lies in (-1, -0.5]."""
    w = fm.weights
    l1 = np.abs(w.data).sum(axis=2)
    sig = _sigmoid(l1)
    scale = 1.0 / (fm.g_out * fm.g_in)
    value = -scale * sig.sum()

    def bwd(g):
        # d||T_ij||_1 / dw = sign(w); the kink at exactly 0 gets subgradient 0
        coeff = -scale * (sig * (1.0 - sig))
        return (float(g) * coeff[:, :, None] * np.sign(w.data),)

    return result_of(np.asarray(value), (w,), bwd, cls=Tracked)


def capacity_loss(y: Tensor5, groups: int, diagnostics: dict | None = None) -> Tracked:
    """(1/G^2) * sum_ij cosine(avg(Y_i), avg(Y_j)), per-sample then batch-mean.

    Diagonal pairs contribute exactly 1 each (a 1/G floor).  Off-diagonal
    cosines use an epsilon-stabilised denominator; pooled vectors of zero
    norm are counted in ``diagnostics['zero_pooled']``.
    """
    n, ch, t, h, w = y.shape
    if ch % groups:
        raise UsageError(f"C={ch} not divisible into {groups} groups")
    c = ch // groups
    vol = t * h * w
    u = y.data.mean(axis=(2, 3, 4)).reshape(n, groups, c)
    norms = np.sqrt((u * u).sum(axis=2))  # (n, g)
    if diagnostics is not None:
        diagnostics["zero_pooled"] = int((norms == 0.0).sum())
    dots = np.einsum("nic,njc->nij", u, u)
    denom = norms[:, :, None] * norms[:, None, :] + COSINE_EPS
    cos = dots / denom
    off = cos.sum(axis=(1, 2)) - np.einsum("nii->n", cos)
    value = (groups + off.mean()) / (groups * groups)

    def bwd(g):
        # d cos(u_i, u_j)/d u_i = (u_j - cos * |u_j| * u_i/|u_i|) / D; u_i sits
        # in both slots of the symmetric ordered sum, hence the factor 2
        gu = np.zeros_like(u)
        safe = np.maximum(norms, 1e-300)
        for i in range(groups):
            for j in range(groups):
                if i == j:
                    continue
                d = denom[:, i, j][:, None]
                cij = cos[:, i, j][:, None]
                gu[:, i] += 2.0 * (u[:, j] - cij * norms[:, j][:, None] *
                                   u[:, i] / safe[:, i][:, None]) / d
        scale = float(g) / (groups * groups * n)
        gflat = (gu * scale).reshape(n, ch)
        return (np.broadcast_to(gflat[:, :, None, None, None] / vol,
                                (n, ch, t, h, w)).copy(),)

    return result_of(np.asarray(value), (y,), bwd, cls=Tracked)


def cross_entropy(logits: Tracked, labels: np.ndarray) -> Tracked:
    """Mean negative log softmax probability of the true class."""
    z = logits.data
    if z.ndim != 2:
        raise UsageError(f"logits must be (N, K), got {z.shape}")
    n, k = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise UsageError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise UsageError(f"label out of range [0, {k})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    value = (lse - z[np.arange(n), labels]).mean()
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return (float(g) / n * gz,)

    return result_of(np.asarray(value), (logits,), bwd, cls=Tracked)


def total_loss(cls_loss: Tracked, interactions: list[Tracked],
               capacities: list[Tracked], weights: LossWeights) -> Tracked:
    """cls + alpha * mean(interactions) + beta * mean(capacities).

    Regulariser terms are averaged over the inserted blocks; with no blocks
    the total equals the classification loss exactly.
    """
    terms: list[tuple[Tracked, float]] = [(cls_loss, 1.0)]
    if interactions:
        terms += [(t, weights.alpha / len(interactions)) for t in interactions]
    if capacities:
        terms += [(t, weights.beta / len(capacities)) for t in capacities]
    return weighted_sum_scalars(terms)


def weighted_sum_scalars(terms: list[tuple[Tracked, float]]) -> Tracked:
    value = sum(float(t.data) * w for t, w in terms)
    coeffs = [w for _, w in terms]

    def bwd(g):
        return tuple(np.asarray(float(g) * w) for w in coeffs)

    return result_of(np.asarray(value), tuple(t for t, _ in terms), bwd, cls=Tracked)
