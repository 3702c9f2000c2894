"""Test-split accuracy and the per-layer standard deviation profile."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any

import numpy as np

from .bayes_layer import sigma_summary
from .const import DEFAULT_SEED
from .data import Split, batches
from .exceptions import EmptySplit, InvalidConfig, NoVariationalLayers
from .model import ForwardMode
from .nn_ops import softmax
from .objective import mean_predictive_entropy, predictive_distribution

if TYPE_CHECKING:
    from .data import Dataset
    from .model import PartialBayesNet

_LOGGER = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


class EvalMode(StrEnum):
    """Mean weights or Monte-Carlo predictive averaging."""

    MEAN = "mean"
    MC = "mc"


@dataclass(frozen=True)
class EvalResult:
    """Accuracy of one split."""

    split: Split
    accuracy: float
    n_correct: int
    n_total: int
    mode: EvalMode = EvalMode.MEAN
    mc_samples: int = 1
    mean_predictive_entropy: float = 0.0
    wall_time: float = field(default=0.0, compare=False)

    @property
    def mode_label(self) -> str:
        """"mean" or "mc(N)"."""
        if self.mode is EvalMode.MC:
            return f"mc({self.mc_samples})"
        return str(self.mode)

    def to_row(self, include_timing: bool = False) -> dict[str, Any]:
        """Row form."""
        row: dict[str, Any] = {
            "kind": "result",
            "split": str(self.split),
            "mode": self.mode_label,
            "accuracy": self.accuracy,
            "n_correct": self.n_correct,
            "n_total": self.n_total,
            "mean_predictive_entropy": self.mean_predictive_entropy,
        }
        if include_timing:
            row["wall_time"] = self.wall_time
        return row


def evaluate(
    model: PartialBayesNet,
    dataset: Dataset,
    split: Split,
    mode: EvalMode = EvalMode.MEAN,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
    batch_size: int = EVAL_BATCH_SIZE,
) -> EvalResult:
    """Argmax accuracy with batch norm in eval mode; ties go to the lowest class."""
    if dataset.count(split) == 0:
        raise EmptySplit(f"split {split} is empty")
    if mode is EvalMode.MC and n_samples < 1:
        raise InvalidConfig("mc_samples", "must be at least 1")
    if rng is None:
        rng = np.random.default_rng(DEFAULT_SEED)
    correct = 0
    total = 0
    entropy = 0.0
    for images, labels in batches(dataset, split, batch_size):
        if mode is EvalMode.MC:
            probs = predictive_distribution(model, images, n_samples, rng)
        else:
            logits = model.forward(images, mode=ForwardMode.MEAN, training=False)
            probs = softmax(logits.astype(np.float64))
        correct += int(np.count_nonzero(np.argmax(probs, axis=1) == labels))
        total += labels.shape[0]
        entropy += mean_predictive_entropy(probs) * labels.shape[0]
    result = EvalResult(
        split=split,
        accuracy=correct / total,
        n_correct=correct,
        n_total=total,
        mode=mode,
        mc_samples=n_samples if mode is EvalMode.MC else 1,
        mean_predictive_entropy=entropy / total,
    )
    _LOGGER.debug(
        "[%s] %s accuracy %.4f (%s/%s)",
        split,
        result.mode_label,
        result.accuracy,
        correct,
        total,
    )
    return result


@dataclass(frozen=True)
class SigmaStats:
    """Summary of sigma = softplus(rho) for one variational layer."""

    layer: str
    depth: int
    group: int
    kernel_size: int
    min: float
    mean: float
    max: float
    std: float

    def to_row(self, include_timing: bool = False) -> dict[str, Any]:  # noqa: ARG002
        """Row form."""
        return {
            "kind": "sigma",
            "layer": self.layer,
            "depth": self.depth,
            "group": self.group,
            "kernel_size": self.kernel_size,
            "sigma_min": self.min,
            "sigma_mean": self.mean,
            "sigma_max": self.max,
            "sigma_std": self.std,
        }


@dataclass(frozen=True)
class SigmaProfile:
    """Sigma statistics ordered by depth."""

    layers: tuple[SigmaStats, ...]

    def __len__(self) -> int:
        """Layer count."""
        return len(self.layers)

    def by_group(self) -> dict[int, float]:
        """Mean sigma per convolution group."""
        groups: dict[int, list[float]] = {}
        for stats in self.layers:
            groups.setdefault(stats.group, []).append(stats.mean)
        return {g: float(np.mean(v)) for g, v in sorted(groups.items())}


def sigma_profile(model: PartialBayesNet) -> SigmaProfile:
    """Sigma statistics of every variational layer."""
    layers = model.variational_layers()
    if not layers:
        raise NoVariationalLayers("model has no variational layer")
    stats = []
    for layer in sorted(layers, key=lambda c: c.depth):
        summary = sigma_summary(layer.params)
        stats.append(
            SigmaStats(
                layer=layer.name,
                depth=layer.depth,
                group=layer.group,
                kernel_size=layer.spec.kernel_size,
                min=summary["min"],
                mean=summary["mean"],
                max=summary["max"],
                std=summary["std"],
            ),
        )
    return SigmaProfile(tuple(stats))
