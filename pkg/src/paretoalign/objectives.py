"""Loss functions and preference sampling for scalarized multi-objective training.

The training objective for one sampled preference vector ``pi`` is

    pi_1 * L_click + pi_2 * L_second + reg_weight * L_reg

where L_second is the order BCE loss, or the distortion loss when a second
real objective is unavailable. L_reg is the non-uniformity penalty on the
preference-weighted losses, which keeps the learned front broad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPSILON_CLIP = 1e-4


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Configuration of the scalarized objective.

    ``order_negative_weight`` adds sampled non-target items with label 0 to
    the order BCE (weight 0 restricts it to the clicked target only). The
    contrastive terms give the order objective ranking content, which is
    what lets the preference vector trade order density against recall.
    """

    reg_weight: float = 1.0
    n_negatives: int = 64
    use_distortion: bool = False
    exact_softmax_threshold: int = 2048
    order_negative_weight: float = 1.0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ObjectiveError("reg_weight must be >= 0")
        if self.n_negatives < 1:
            raise ObjectiveError("n_negatives must be >= 1")
        if self.order_negative_weight < 0:
            raise ObjectiveError("order_negative_weight must be >= 0")


@dataclass(frozen=True)
class DirichletParams:
    beta: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        if len(self.beta) < 2 or any(b <= 0 for b in self.beta):
            raise ObjectiveError("Dirichlet concentrations must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_click: float
    l_order: float
    l_distortion: float
    l_reg: float
    scalarized: float


def sample_preference(params: DirichletParams, rng: np.random.Generator,
                      epsilon_clip: float = EPSILON_CLIP) -> np.ndarray:
    """Dirichlet draw via normalized Gamma variates, clipped away from the
    simplex boundary and renormalized."""
    draws = rng.gamma(shape=np.asarray(params.beta, dtype=np.float64))
    pi = draws / draws.sum()
    pi = np.clip(pi, epsilon_clip, 1.0 - epsilon_clip)
    return pi / pi.sum()


def _logsumexp(scores: np.ndarray) -> float:
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def click_loss(scores: np.ndarray, target: int, cfg: LossConfig,
               rng: np.random.Generator | None = None,
               negatives: np.ndarray | None = None) -> float:
    """Next-click cross-entropy for one instance.

    Exact softmax for catalogs up to the configured threshold; above it, a
    sampled softmax over the target plus uniform non-target negatives with
    the log expected-count correction for the proposal.
    """
    c = scores.shape[0]
    if target < 0 or target >= c:
        raise ObjectiveError(f"target {target} outside catalog of size {c}")
    if c <= cfg.exact_softmax_threshold:
        return _logsumexp(scores) - float(scores[target])
    if negatives is None:
        if rng is None:
            raise ObjectiveError("sampled softmax needs an rng or explicit negatives")
        raw = rng.integers(0, c - 1, size=cfg.n_negatives)
        negatives = raw + (raw >= target)
    cand = np.concatenate([[target], negatives])
    adj = scores[cand].astype(np.float64)
    adj[1:] -= math.log(len(negatives) / (c - 1))
    return _logsumexp(adj) - float(adj[0])


def order_loss(logit: float, ordered: int) -> float:
    """Binary cross-entropy on the target item's order logit."""
    z = float(logit)
    return max(z, 0.0) - z * ordered + math.log1p(math.exp(-abs(z)))


def distortion_loss(scores: np.ndarray) -> float:
    """Cross-entropy between the uniform distribution and softmax(scores).

    Equals ln(c) plus the KL divergence of the uniform target from the
    prediction, so it is minimized exactly at uniform predictions.
    """
    c = scores.shape[0]
    if c < 2:
        raise ObjectiveError("distortion loss needs at least 2 items")
    return _logsumexp(scores) - float(scores.mean())


def nonuniformity_reg(pi: np.ndarray, losses: np.ndarray) -> float:
    """KL divergence of the normalized preference-weighted losses from uniform."""
    reg, _ = nonuniformity_reg_grad(pi, losses)
    return reg


def nonuniformity_reg_grad(pi: np.ndarray, losses: np.ndarray) -> tuple[float, np.ndarray]:
    """Regularizer value and its derivative with respect to each loss."""
    pi = np.asarray(pi, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0):
        raise ObjectiveError("losses must be non-negative")
    m = len(losses)
    weighted = pi * losses
    total = weighted.sum()
    if total <= 0.0:
        return 0.0, np.zeros(m)
    lhat = weighted / total
    log_terms = np.where(lhat > 0, np.log(np.maximum(lhat, 1e-300) * m), 0.0)
    reg = float((lhat * log_terms).sum())
    grad = np.where(lhat > 0, pi * (log_terms - reg) / total, 0.0)
    return reg, grad


def scalarized_loss(l_click: float, l_second: float, pi: np.ndarray,
                    cfg: LossConfig) -> LossBreakdown:
    """Combine per-objective losses into the scalarized training objective.

    ``l_second`` is the order loss normally, the distortion loss when
    ``cfg.use_distortion`` substitutes it as the second objective.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (2,):
        raise ObjectiveError(f"expected a 2-simplex preference, got shape {pi.shape}")
    reg = nonuniformity_reg(pi, np.array([l_click, l_second]))
    scalarized = float(pi[0] * l_click + pi[1] * l_second + cfg.reg_weight * reg)
    if cfg.use_distortion:
        return LossBreakdown(l_click=l_click, l_order=0.0, l_distortion=l_second,
                             l_reg=reg, scalarized=scalarized)
    return LossBreakdown(l_click=l_click, l_order=l_second, l_distortion=0.0,
                         l_reg=reg, scalarized=scalarized)
