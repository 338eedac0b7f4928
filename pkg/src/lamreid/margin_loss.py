"""Adaptive-margin pair loss, fixed-margin baselines, and their feature gradients.

Pairs are given as index arrays into a feature matrix ``F`` (one row per
unique image in the mini-batch), so an image shared by several pairs gets its
gradient accumulated once per pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("adaptive", "contrastive", "triplet")


@dataclass(frozen=True)
class LossConfig:
    mu: float = 8.0
    gamma: float = 2.1
    lam: float = 0.01
    loss_kind: str = "adaptive"
    margin: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.mu <= 0 or self.gamma <= 0:
            raise ValueError("mu and gamma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.margin <= 0:
            raise ValueError("fixed margin must be positive")


@dataclass(frozen=True)
class MarginState:
    s: float
    d: float
    m_p: float
    m_n: float
    mu: float
    gamma: float

    @property
    def m_tau(self) -> float:
        return 0.5 * (self.m_p + self.m_n)

    @property
    def m_c(self) -> float:
        return 0.5 * (self.m_n - self.m_p)


def pair_distance(fa, fb) -> float:
    """Squared Euclidean distance between two feature vectors."""
    fa = np.asarray(fa, dtype=float)
    fb = np.asarray(fb, dtype=float)
    if fa.shape != fb.shape:
        raise ValueError(f"feature dimensions differ: {fa.shape} vs {fb.shape}")
    diff = fa - fb
    return float(diff @ diff)


def pair_distances(features, ia, ib):
    diff = features[ia] - features[ib]
    return np.einsum("ij,ij->i", diff, diff)


def batch_mean_distances(distances, labels):
    """Mean distance over positive pairs (s) and over negative pairs (d)."""
    distances = np.asarray(distances, dtype=float)
    labels = np.asarray(labels)
    pos, neg = labels == 1, labels == -1
    if not pos.any() or not neg.any():
        raise ValueError("batch must contain at least one positive and one negative pair")
    return float(distances[pos].mean()), float(distances[neg].mean())


def adaptive_margins(s: float, d: float, mu: float = 8.0, gamma: float = 2.1) -> MarginState:
    """Up-margin saturating in the negative mean, down-margin softplus in the positive mean.

    ``m_p`` is held one ulp under ``1/mu``: once ``exp(-mu d)`` drops below
    machine epsilon the nearest double would be the asymptote itself.
    """
    m_p = min(-math.expm1(-mu * d) / mu, math.nextafter(1.0 / mu, 0.0))
    # s + softplus(-gamma s) / gamma: never rounds below s, no overflow
    m_n = s + math.log1p(math.exp(-gamma * s)) / gamma
    return MarginState(float(s), float(d), m_p, m_n, mu, gamma)


def hinge_loss(distances, labels, margins: MarginState):
    """Elementwise ``max(M_c - y (M_tau - D), 0)``."""
    distances = np.asarray(distances, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return np.maximum(margins.m_c - labels * (margins.m_tau - distances), 0.0)


def regularizer(params: dict) -> float:
    """Sum of squared entries of every trainable tensor."""
    return float(sum(np.sum(np.square(v, dtype=float)) for v in params.values()))


def loss_feature_grads(features, ia, ib, labels, margins: MarginState):
    """dL/dF for the adaptive hinge with the margins held fixed.

    Active pairs (positive hinge argument) contribute ``2 y (f_a - f_b)`` to
    the first image and the negation to the second.
    """
    D = pair_distances(features, ia, ib)
    labels = np.asarray(labels, dtype=float)
    active = (margins.m_c - labels * (margins.m_tau - D)) > 0
    coef = np.where(active, 2.0 * labels, 0.0)
    g = (coef[:, None] * (features[ia] - features[ib])).astype(features.dtype, copy=False)
    grad = np.zeros_like(features)
    np.add.at(grad, ia, g)
    np.add.at(grad, ib, -g)
    return grad


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    margins: MarginState
    active_fraction: float


def adaptive_loss(features, ia, ib, labels, mu=8.0, gamma=2.1, margins=None) -> LossResult:
    """Hinge sum over all pairs with margins from this batch's mean distances."""
    D = pair_distances(features, ia, ib)
    if margins is None:
        margins = adaptive_margins(*batch_mean_distances(D, labels), mu, gamma)
    h = hinge_loss(D, labels, margins)
    grad = loss_feature_grads(features, ia, ib, labels, margins)
    return LossResult(float(h.sum()), grad, margins, float(np.mean(h > 0)))


def contrastive_loss(features, ia, ib, labels, margin=1.0, mu=8.0, gamma=2.1) -> LossResult:
    """Positives pay ``D``; negatives pay ``max(m - D, 0)``."""
    labels = np.asarray(labels)
    diff = features[ia] - features[ib]
    D = np.einsum("ij,ij->i", diff, diff)
    pos = labels == 1
    neg_active = (~pos) & (D < margin)
    loss = float(D[pos].sum() + (margin - D[neg_active]).sum())
    coef = np.where(pos, 2.0, np.where(neg_active, -2.0, 0.0))
    g = (coef[:, None] * diff).astype(features.dtype, copy=False)
    grad = np.zeros_like(features)
    np.add.at(grad, ia, g)
    np.add.at(grad, ib, -g)
    margins = adaptive_margins(*batch_mean_distances(D, labels), mu, gamma)
    active = np.mean(pos & (D > 0) | neg_active)
    return LossResult(loss, grad, margins, float(active))


def triplet_loss(features, anchors, positives, negatives, margin=1.0) -> LossResult:
    """``sum max(D(a,p) - D(a,n) + m, 0)``; margins in the result are unset (NaN)."""
    dp = features[anchors] - features[positives]
    dn = features[anchors] - features[negatives]
    Dp = np.einsum("ij,ij->i", dp, dp)
    Dn = np.einsum("ij,ij->i", dn, dn)
    viol = Dp - Dn + margin
    active = viol > 0
    loss = float(viol[active].sum())
    a = active[:, None].astype(features.dtype)
    grad = np.zeros_like(features)
    np.add.at(grad, anchors, 2.0 * a * (dp - dn))
    np.add.at(grad, positives, -2.0 * a * dp)
    np.add.at(grad, negatives, 2.0 * a * dn)
    nan = float("nan")
    return LossResult(loss, grad.astype(features.dtype, copy=False),
                      MarginState(nan, nan, nan, nan, nan, nan), float(active.mean()))


def batch_loss(features, batch, config: LossConfig, margins=None) -> LossResult:
    """Dispatch on ``config.loss_kind`` over a :class:`~lamreid.sampler.PairBatch`.

    With ``reduction="mean"`` the hinge sum is divided by the number of terms
    (pairs, or triplets for the triplet loss). For the fixed-margin baselines
    the batch statistics and adaptive margins are still computed so training
    logs keep the same columns. Passing ``margins`` freezes them (adaptive
    kind only), which is what finite-difference checks need.
    """
    if config.loss_kind == "adaptive":
        res = adaptive_loss(features, batch.ia, batch.ib, batch.y, config.mu, config.gamma, margins)
        terms = len(batch.y)
    elif config.loss_kind == "contrastive":
        res = contrastive_loss(features, batch.ia, batch.ib, batch.y, config.margin, config.mu, config.gamma)
        terms = len(batch.y)
    else:
        a, p, n = batch.triplets()
        res = triplet_loss(features, a, p, n, config.margin)
        D = pair_distances(features, batch.ia, batch.ib)
        res.margins = adaptive_margins(*batch_mean_distances(D, batch.y), config.mu, config.gamma)
        terms = len(a)
    if config.reduction == "mean":
        res.loss /= terms
        res.grad /= terms
    return res


def total_loss(features, batch, params: dict, config: LossConfig) -> float:
    return batch_loss(features, batch, config).loss + config.lam * regularizer(params)
