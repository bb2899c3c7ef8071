"""Classification loss on soft reconstructions plus a batch contrastive term."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .numerics import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    m_plus: float = 0.5
    m_minus: float = 3.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.m_plus < 0 or self.m_minus < 0:
            raise ValueError("margins must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.m_minus < self.m_plus:
            log.warning("negative margin %.3g is below positive margin %.3g",
                        self.m_minus, self.m_plus)


def sr_cel(logits: np.ndarray, labels: np.ndarray, tau: float) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(logits / tau)``; returns ``(loss, dL/dlogits)``."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N, n_classes = logits.shape
    if labels.shape[0] != N:
        raise ShapeError(f"{labels.shape[0]} labels for {N} rows of logits")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    s = logits / tau
    s = s - s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(lse - s[rows, labels]))
    prob = np.exp(s - lse[:, None])
    prob[rows, labels] -= 1.0
    return loss, prob / (N * tau)


def _pair_dist(a: np.ndarray, b: np.ndarray):
    diff = a[:, None, :] - b[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    # unit directions; zero-distance pairs get a zero subgradient
    unit = diff / np.where(dist > 0, dist, 1.0)[..., None]
    return dist, unit


def contrastive(z_hat: np.ndarray, labels: np.ndarray,
                cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """Hinged intra/inter-class mean distances, averaged over the classes in the batch.

    For a class c with members B_c, ``d+`` sums the distances of all ordered
    pairs of distinct members and divides by ``|B_c|**2``; ``d-`` is the mean
    distance from members to non-members. The class term is
    ``max(d+ - m+, 0) + max(m- - d-, 0)``. Singleton classes contribute no
    ``d+`` term; a batch holding one class contributes no ``d-`` term.
    Returns ``(loss, dL/dz_hat)``.
    """
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    N = z_hat.shape[0]
    if labels.shape[0] != N:
        raise ShapeError(f"{labels.shape[0]} labels for {N} embeddings")
    grad = np.zeros_like(z_hat)
    classes = np.unique(labels)
    if len(classes) == 1:
        log.warning("contrastive loss on a single-class batch: negative term skipped")
    total = 0.0
    for c in classes:
        pos = np.flatnonzero(labels == c)
        neg = np.flatnonzero(labels != c)
        n_c = len(pos)
        if n_c >= 2:
            dist, unit = _pair_dist(z_hat[pos], z_hat[pos])
            d_plus = dist.sum() / n_c ** 2
            if d_plus - cfg.m_plus > 0:
                total += d_plus - cfg.m_plus
                # each ordered pair (i, j) pushes i along +unit and j along -unit
                g = (unit.sum(axis=1) - unit.sum(axis=0)) / n_c ** 2
                grad[pos] += g
        if len(neg):
            dist, unit = _pair_dist(z_hat[pos], z_hat[neg])
            scale = n_c * len(neg)
            d_minus = dist.sum() / scale
            if cfg.m_minus - d_minus > 0:
                total += cfg.m_minus - d_minus
                grad[pos] -= unit.sum(axis=1) / scale
                grad[neg] += unit.sum(axis=0) / scale
    n_cls = len(classes)
    return total / n_cls, grad / n_cls


def total_loss(sr_cel_value: float, contrastive_value: float, gamma: float) -> float:
    return sr_cel_value + gamma * contrastive_value
