"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from .bayes_layer import PriorSpec, kl_mc, sample_weights
from .exceptions import InvalidConfig
from .model import (
    ArchSpec,
    ForwardMode,
    PartialBayesNet,
    PlacementConfig,
    VariationalConv2d,
    build,
)
from .nn_ops import Tensor, softmax
from .objective import cross_entropy
from .trainer import Trainer, TrainConfig

_LOGGER = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
FALLBACK_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-3
ABSOLUTE_FLOOR = 1e-6
GRADCHECK_BATCH = 4


class GradcheckScope(StrEnum):
    """Parameter groups to check."""

    ALL = "all"
    BAYES_ONLY = "bayes-only"
    CERTAIN_ONLY = "certain-only"


@dataclass(frozen=True)
class GroupResult:
    """Largest discrepancy found in one parameter tensor."""

    name: str
    max_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    fallbacks: int = 0

    @property
    def passed(self) -> bool:
        """Whether the error is within tolerance."""
        return self.max_error <= self.tolerance


@dataclass
class GradcheckReport:
    """Per-group gradient check results."""

    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """Whether every group passed."""
        return all(group.passed for group in self.groups)

    @property
    def worst(self) -> GroupResult | None:
        """Group with the largest error."""
        return max(self.groups, key=lambda g: g.max_error, default=None)


def relative_error(
    analytic: float,
    numeric: float,
    floor: float = ABSOLUTE_FLOOR,
) -> float:
    """|a - n| / max(|a|, |n|), or |a - n| when both are below floor."""
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff if scale < floor else diff / scale


@dataclass(frozen=True)
class TensorCheck:
    """Comparison of one tensor's analytic and numeric gradients."""

    max_error: float
    max_abs_error: float
    checked: int
    fallbacks: int = 0


def _differences(
    loss_fn: Callable[[], float],
    flat: Tensor,
    i: int,
    h: float,
) -> tuple[float, float]:
    original = flat[i].copy()
    flat[i] = original + h
    plus = loss_fn()
    flat[i] = original - h
    minus = loss_fn()
    flat[i] = original
    return plus, minus


def check_gradients(
    loss_fn: Callable[[], float],
    param: Tensor,
    analytic: Tensor,
    h: float = DEFAULT_STEP,
    indices: Tensor | None = None,
    tolerance: float = DEFAULT_TOLERANCE,
    fallback_step: float = FALLBACK_STEP,
) -> TensorCheck:
    """Compare analytic with central differences, perturbing param in place.

    An entry whose central difference at h misses by more than tolerance is
    retried at fallback_step and scored by the best of the central, forward and
    backward differences there, so a ReLU kink inside the step does not count
    as a mismatch. Errors are relative with an absolute fallback near zero.
    """
    if analytic.shape != param.shape:
        raise InvalidConfig("analytic", f"shape {analytic.shape} != {param.shape}")
    flat = param.reshape(-1)
    if not np.shares_memory(flat, param):
        raise InvalidConfig("param", "must be contiguous")
    grad = analytic.reshape(-1)
    positions = np.arange(flat.size) if indices is None else indices
    max_error = max_abs = 0.0
    fallbacks = 0
    base: float | None = None
    for i in positions:
        value = float(grad[i])
        plus, minus = _differences(loss_fn, flat, i, h)
        numeric = (plus - minus) / (2 * h)
        if relative_error(value, numeric) > tolerance:
            fallbacks += 1
            if base is None:
                base = loss_fn()
            plus, minus = _differences(loss_fn, flat, i, fallback_step)
            numeric = min(
                (
                    (plus - minus) / (2 * fallback_step),
                    (plus - base) / fallback_step,
                    (base - minus) / fallback_step,
                ),
                key=lambda n: relative_error(value, n),  # noqa: B023
            )
        max_error = max(max_error, relative_error(value, numeric))
        max_abs = max(max_abs, abs(value - numeric))
    return TensorCheck(max_error, max_abs, len(positions), fallbacks)


def mini_arch() -> ArchSpec:
    """Tiny architecture with the full five-group topology."""
    return ArchSpec(
        input_size=(8, 8, 1),
        num_classes=3,
        group_channels=(2, 2, 3, 3, 4),
        blocks_per_group=1,
    )


def mini_model(
    placement: PlacementConfig | None = None,
    seed: int = 0,
    rho_init: float = -3.0,
) -> PartialBayesNet:
    """Float64 mini network, every group Bayesian unless placement says otherwise."""
    if placement is None:
        placement = PlacementConfig.of(1, 2, 3, 4, 5)
    model = build(mini_arch(), placement, np.random.default_rng(seed), rho_init)
    return model.astype(np.float64)


def _select(size: int, limit: int | None, rng: np.random.Generator) -> Tensor | None:
    if limit is None or size <= limit:
        return None
    return np.sort(rng.choice(size, size=limit, replace=False))


def gradcheck(
    model: PartialBayesNet,
    tolerance: float = DEFAULT_TOLERANCE,
    scope: GradcheckScope = GradcheckScope.ALL,
    h: float = DEFAULT_STEP,
    max_entries: int | None = 20,
    seed: int = 0,
    kl_weight: float = 1.0,
    prior: PriorSpec | None = None,
) -> GradcheckReport:
    """Check mu/rho gradients of L_unc at frozen epsilon and w1 gradients of L_cen.

    Runs on a float64 copy; model itself is not modified. Failures are reported,
    never raised.
    """
    if not tolerance > 0:
        raise InvalidConfig("tolerance", "must be positive")
    net = model.astype(np.float64)
    prior = prior or PriorSpec()
    rng = np.random.default_rng(seed)
    channels, height, width = net.arch.input_size[2], *net.arch.input_size[:2]
    images = rng.standard_normal((GRADCHECK_BATCH, channels, height, width))
    labels = rng.integers(0, net.arch.num_classes, size=GRADCHECK_BATCH)
    trainer = Trainer(
        net,
        TrainConfig(kl_weight=kl_weight, seed=seed),
        prior=prior,
        rng=rng,
    )
    report = GradcheckReport(tolerance=tolerance)

    layers = net.variational_layers()
    if scope is not GradcheckScope.CERTAIN_ONLY and layers:
        for layer in layers:
            sample_weights(layer.params, rng)
        _, _, grads = trainer.uncertain_gradients(images, labels, ForwardMode.FROZEN)

        for layer in layers:
            pair = grads[layer.name]
            loss_fn = _uncertain_loss(net, layer, images, labels, prior, kl_weight)
            for suffix, param, analytic in (
                ("mu", layer.params.mu, pair.delta_mu),
                ("rho", layer.params.rho, pair.delta_rho),
            ):
                report.groups.append(
                    _group(
                        f"{layer.name}.{suffix}",
                        loss_fn,
                        param,
                        analytic,
                        h,
                        _select(param.size, max_entries, rng),
                        tolerance,
                    ),
                )

    if scope is not GradcheckScope.BAYES_ONLY:
        trainer.certain_gradients(images, labels)
        certain = [
            (p.name, p.value, p.grad.copy())
            for p in net.partition().certain
            if p.grad is not None
        ]

        def certain_loss() -> float:
            logits = net.forward(
                images,
                mode=ForwardMode.MEAN,
                training=True,
                update_running=False,
            )
            return cross_entropy(softmax(logits), labels)

        for name, value, analytic in certain:
            report.groups.append(
                _group(
                    name,
                    certain_loss,
                    value,
                    analytic,
                    h,
                    _select(value.size, max_entries, rng),
                    tolerance,
                ),
            )
    worst = report.worst
    if worst is not None:
        _LOGGER.info(
            "[gradcheck] %s groups, worst %s at %.3g",
            len(report.groups),
            worst.name,
            worst.max_error,
        )
    return report


def _group(
    name: str,
    loss_fn: Callable[[], float],
    param: Tensor,
    analytic: Tensor,
    h: float,
    indices: Tensor | None,
    tolerance: float,
) -> GroupResult:
    result = check_gradients(loss_fn, param, analytic, h, indices, tolerance)
    _LOGGER.debug(
        "[%s] max error %.3g over %s entries, %s at the fallback step",
        name,
        result.max_error,
        result.checked,
        result.fallbacks,
    )
    return GroupResult(
        name=name,
        max_error=result.max_error,
        max_abs_error=result.max_abs_error,
        checked=result.checked,
        tolerance=tolerance,
        fallbacks=result.fallbacks,
    )


def _uncertain_loss(
    net: PartialBayesNet,
    layer: VariationalConv2d,
    images: Tensor,
    labels: Tensor,
    prior: PriorSpec,
    kl_weight: float,
) -> Callable[[], float]:
    """Single-sample L_unc at frozen epsilon as a function of one layer's theta.

    KL terms of the other layers do not depend on this layer and are left out.
    """

    def loss() -> float:
        logits = net.forward(
            images,
            mode=ForwardMode.FROZEN,
            training=True,
            update_running=False,
        )
        kl = kl_mc(layer.params, prior, layer.params.last_weight)
        return kl_weight * kl + cross_entropy(softmax(logits), labels)

    return loss
