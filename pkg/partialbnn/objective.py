"""Hybrid objective J = L_cen + L_unc and the Monte-Carlo predictive distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .const import PROB_FLOOR
from .exceptions import InvalidConfig, LabelOutOfRange, ShapeMismatch
from .model import ForwardMode
from .nn_ops import Tensor, softmax

if TYPE_CHECKING:
    from .model import PartialBayesNet


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step losses; total == l_cen + l_unc, l_unc == kl_weight * kl + nll."""

    l_cen: float
    l_unc: float
    kl_term: float
    nll_term: float
    total: float
    kl_weight: float = 1.0

    @classmethod
    def compose(
        cls,
        l_cen: float,
        kl_term: float,
        nll_term: float,
        kl_weight: float,
    ) -> LossBreakdown:
        """Assemble the breakdown from its parts."""
        l_unc = uncertain_loss(kl_term, nll_term, kl_weight)
        return cls(
            l_cen=l_cen,
            l_unc=l_unc,
            kl_term=kl_term,
            nll_term=nll_term,
            total=l_cen + l_unc,
            kl_weight=kl_weight,
        )


def _check_labels(probs: Tensor, labels: Tensor) -> None:
    if probs.ndim != 2:  # noqa: PLR2004
        raise ShapeMismatch("probs rank", 2, probs.ndim)
    if labels.shape != (probs.shape[0],):
        raise ShapeMismatch("labels", (probs.shape[0],), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        bad = labels[(labels < 0) | (labels >= probs.shape[1])]
        raise LabelOutOfRange(
            f"label {int(bad[0])} outside [0, {probs.shape[1]})",
        )


def cross_entropy(probs: Tensor, labels: Tensor) -> float:
    """Mean over the batch of -log p[label] (one-hot targets)."""
    _check_labels(probs, labels)
    picked = probs[np.arange(labels.shape[0]), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_cross_entropy_grad(probs: Tensor, labels: Tensor) -> Tensor:
    """Gradient of the mean cross-entropy with respect to the logits."""
    _check_labels(probs, labels)
    grad = probs.copy()
    grad[np.arange(labels.shape[0]), labels] -= 1
    return grad / labels.shape[0]


def uncertain_loss(kl: float, nll: float, kl_weight: float) -> float:
    """kl_weight * KL + NLL, the Monte-Carlo free energy of the uncertain part."""
    if not kl_weight > 0:
        raise InvalidConfig("kl_weight", "must be positive")
    return kl_weight * kl + nll


def predictive_distribution(
    model: PartialBayesNet,
    x: Tensor,
    n_samples: int,
    rng: np.random.Generator,
) -> Tensor:
    """Average softmax over n_samples independent draws of w2."""
    if n_samples < 1:
        raise InvalidConfig("n_samples", "must be at least 1")
    total = np.zeros((x.shape[0], model.arch.num_classes), dtype=np.float64)
    for _ in range(n_samples):
        logits = model.forward(x, mode=ForwardMode.SAMPLED, training=False, rng=rng)
        total += softmax(logits.astype(np.float64))
    return total / n_samples


def predictive_entropy(probs: Tensor) -> float:
    """Entropy -sum p log p in nats of one distribution."""
    p = np.asarray(probs, dtype=np.float64)
    return float(-np.sum(p * np.log(np.maximum(p, PROB_FLOOR))))


def mean_predictive_entropy(probs: Tensor) -> float:
    """Mean entropy over the rows of an N x C matrix."""
    p = np.asarray(probs, dtype=np.float64)
    return float(np.mean(-np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=1)))
