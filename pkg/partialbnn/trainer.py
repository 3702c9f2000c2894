"""Alternating training of uncertain (mu, rho) and certain (w1) parameters."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .bayes_layer import (
    PriorSpec,
    VariationalParams,
    kl_mc,
    log_prior_grad_w,
    log_q_grad_w,
    log_q_partials,
    sigmoid,
)
from .const import DEFAULT_SEED, RHO_INIT, STREAM_INIT, STREAM_SAMPLE, STREAM_SHUFFLE
from .data import Split, batches
from .evaluate import EvalMode, evaluate
from .exceptions import (
    EmptySplit,
    InvalidConfig,
    NonFiniteLoss,
    ShapeMismatch,
    StaleSample,
)
from .model import (
    ArchSpec,
    ForwardMode,
    PartialBayesNet,
    PlacementConfig,
    VariationalConv2d,
    build,
)
from .nn_ops import MIN_BN_BATCH, Tensor, softmax
from .objective import LossBreakdown, cross_entropy, softmax_cross_entropy_grad
from .report import RecordKind, TrainRecord

if TYPE_CHECKING:
    from .data import Dataset

_LOGGER = logging.getLogger(__name__)

KL_AUTO = "auto"
MAX_SEED = 2**64


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one training run."""

    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    mc_samples: int = 1
    kl_weight: float | str = KL_AUTO
    seed: int = DEFAULT_SEED
    eval_every: int = 1
    momentum: float = 0.0
    prior_sigma: float = 1.0
    rho_init: float = RHO_INIT
    augment: bool = False
    prefetch: bool = False

    def __post_init__(self) -> None:
        """Validate configuration."""
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate", "must be positive")
        if self.epochs < 0:
            raise InvalidConfig("epochs", "must not be negative")
        if self.batch_size < MIN_BN_BATCH:
            raise InvalidConfig(
                "batch_size",
                f"must be at least {MIN_BN_BATCH} for batch norm",
            )
        if self.mc_samples < 1:
            raise InvalidConfig("mc_samples", "must be at least 1")
        if isinstance(self.kl_weight, str):
            if self.kl_weight != KL_AUTO:
                raise InvalidConfig("kl_weight", f"must be a number or {KL_AUTO!r}")
        elif not self.kl_weight > 0:
            raise InvalidConfig("kl_weight", "must be positive")
        if not 0 <= self.seed < MAX_SEED:
            raise InvalidConfig("seed", "must be an unsigned 64-bit integer")
        if self.eval_every < 1:
            raise InvalidConfig("eval_every", "must be at least 1")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum", "must be in [0, 1)")
        if not self.prior_sigma > 0:
            raise InvalidConfig("prior_sigma", "must be positive")

    def resolve_kl_weight(self, num_batches: int) -> float:
        """Numeric KL weight; "auto" spreads the KL over the epoch's minibatches."""
        if isinstance(self.kl_weight, str):
            return 1.0 / max(num_batches, 1)
        return float(self.kl_weight)

    def to_dict(self) -> dict[str, Any]:
        """Serialize to plain types."""
        return asdict(self)


@dataclass
class GradPair:
    """Accumulated gradients of one variational layer."""

    delta_mu: Tensor
    delta_rho: Tensor

    @classmethod
    def zeros_like(cls, params: VariationalParams) -> GradPair:
        """Zero gradients shaped like params."""
        return cls(np.zeros_like(params.mu), np.zeros_like(params.rho))


def uncertain_backward(
    dL_dw2: Tensor,  # noqa: N803
    dLq_dmu: Tensor,  # noqa: N803
    dLq_drho: Tensor,  # noqa: N803
    params: VariationalParams,
) -> GradPair:
    """Chain the weight gradient into mu and rho and add the direct partials."""
    if not params.is_current():
        raise StaleSample("cached epsilon does not reproduce the sampled weights")
    named = {"dL_dw2": dL_dw2, "dLq_dmu": dLq_dmu, "dLq_drho": dLq_drho}
    for name, grad in named.items():
        if grad.shape != params.shape:
            raise ShapeMismatch(name, params.shape, grad.shape)
    delta_mu = dL_dw2 + dLq_dmu
    delta_rho = dL_dw2 * params.last_epsilon * sigmoid(params.rho) + dLq_drho
    return GradPair(delta_mu=delta_mu, delta_rho=delta_rho)


def sgd_step(param: Tensor, grad: Tensor, eta: float) -> Tensor:
    """Return param - eta * grad."""
    if grad.shape != param.shape:
        raise ShapeMismatch("grad", param.shape, grad.shape)
    if not eta > 0:
        raise InvalidConfig("eta", "must be positive")
    return (param - eta * grad).astype(param.dtype, copy=False)


def _max_abs(grad: Tensor) -> float:
    finite = np.abs(grad[np.isfinite(grad)])
    if finite.size != grad.size:
        return float("inf")
    return float(finite.max()) if finite.size else 0.0


class Trainer:
    """Runs alternating uncertain and certain updates on one model."""

    def __init__(
        self,
        model: PartialBayesNet,
        config: TrainConfig,
        prior: PriorSpec | None = None,
        rng: np.random.Generator | None = None,
    ) -> None:
        """Initialize trainer."""
        self.model = model
        self.config = config
        self.prior = prior or PriorSpec.scaled(config.prior_sigma)
        self.rng = rng or np.random.default_rng(
            np.random.SeedSequence([config.seed, STREAM_SAMPLE]),
        )
        self.kl_weight = config.resolve_kl_weight(1)
        self.step_index = 0
        self.last_accuracy = 0.0
        self._velocity: dict[str, Tensor] = {}

    def _apply(self, name: str, value: Tensor, grad: Tensor) -> None:
        """Update value in place with SGD, optionally with momentum."""
        if self.config.momentum:
            velocity = self._velocity.get(name)
            if velocity is None:
                velocity = np.zeros_like(grad)
            velocity = self.config.momentum * velocity + grad
            self._velocity[name] = velocity
            grad = velocity
        value[...] = sgd_step(value, grad, self.config.learning_rate)

    def uncertain_gradients(
        self,
        images: Tensor,
        labels: Tensor,
        mode: ForwardMode = ForwardMode.SAMPLED,
    ) -> tuple[float, float, dict[str, GradPair]]:
        """KL, NLL and (delta_mu, delta_rho) per layer for one draw of w2."""
        logits = self.model.forward(
            images,
            mode=mode,
            training=True,
            rng=self.rng,
            update_running=False,
        )
        probs = softmax(logits)
        nll = cross_entropy(probs, labels)
        self.model.backward(softmax_cross_entropy_grad(probs, labels))
        lam = self.kl_weight
        kl = 0.0
        grads: dict[str, GradPair] = {}
        for layer in self.model.variational_layers():
            params = layer.params
            w = params.last_weight
            if layer.grad_weight is None:
                raise ShapeMismatch("cache", "backward before update", None)
            kl += kl_mc(params, self.prior, w)
            d_w = layer.grad_weight + lam * (
                log_q_grad_w(params, w) - log_prior_grad_w(self.prior, w)
            )
            d_mu, d_rho = log_q_partials(params, w)
            grads[layer.name] = uncertain_backward(d_w, lam * d_mu, lam * d_rho, params)
        return kl, nll, grads

    def uncertain_phase(self, images: Tensor, labels: Tensor) -> tuple[float, float]:
        """Average mc_samples uncertain gradients and update mu and rho.

        Certain parameters and batch norm running statistics are left untouched.
        """
        layers: list[VariationalConv2d] = self.model.variational_layers()
        if not layers:
            return 0.0, 0.0
        n = self.config.mc_samples
        totals = {layer.name: GradPair.zeros_like(layer.params) for layer in layers}
        kl_sum = nll_sum = 0.0
        for _ in range(n):
            kl, nll, grads = self.uncertain_gradients(images, labels)
            kl_sum += kl
            nll_sum += nll
            for name, pair in grads.items():
                totals[name].delta_mu += pair.delta_mu
                totals[name].delta_rho += pair.delta_rho
        kl_term, nll_term = kl_sum / n, nll_sum / n
        if not (np.isfinite(kl_term) and np.isfinite(nll_term)):
            self._raise_non_finite(
                {f"{k}.mu": v.delta_mu for k, v in totals.items()}
                | {f"{k}.rho": v.delta_rho for k, v in totals.items()},
            )
        for layer in layers:
            pair = totals[layer.name]
            self._apply(f"{layer.name}.mu", layer.params.mu, pair.delta_mu / n)
            self._apply(f"{layer.name}.rho", layer.params.rho, pair.delta_rho / n)
        _LOGGER.debug(
            "[step %s] Uncertain phase: kl %.6g, nll %.6g",
            self.step_index,
            kl_term,
            nll_term,
        )
        return kl_term, nll_term

    def certain_gradients(self, images: Tensor, labels: Tensor) -> tuple[float, Tensor]:
        """L_cen and logits with w2 fixed at mu; fills every certain gradient."""
        logits = self.model.forward(images, mode=ForwardMode.MEAN, training=True)
        probs = softmax(logits)
        l_cen = cross_entropy(probs, labels)
        self.model.backward(softmax_cross_entropy_grad(probs, labels))
        return l_cen, logits

    def certain_phase(self, images: Tensor, labels: Tensor) -> float:
        """Update w1 (convs, batch norm, FC head) against L_cen."""
        l_cen, logits = self.certain_gradients(images, labels)
        certain = self.model.partition().certain
        if not np.isfinite(l_cen):
            self._raise_non_finite(
                {p.name: p.grad for p in certain if p.grad is not None},
            )
        for param in certain:
            if param.grad is None:
                raise ShapeMismatch(param.name, "gradient", None)
            self._apply(param.name, param.value, param.grad)
        self.last_accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
        return l_cen

    def _raise_non_finite(self, grads: dict[str, Tensor]) -> None:
        layer, worst = "output", 0.0
        for name, grad in grads.items():
            value = _max_abs(grad)
            if value > worst:
                layer, worst = name, value
        raise NonFiniteLoss(self.step_index, layer, worst)

    def train_step(self, images: Tensor, labels: Tensor) -> LossBreakdown:
        """Uncertain phase, then certain phase, on one minibatch."""
        if labels.shape[0] == 0:
            raise EmptySplit("empty minibatch")
        kl_term, nll_term = self.uncertain_phase(images, labels)
        l_cen = self.certain_phase(images, labels)
        self.step_index += 1
        return LossBreakdown.compose(l_cen, kl_term, nll_term, self.kl_weight)

    def _sigma_range(self) -> tuple[float | None, float | None, float | None]:
        layers = self.model.variational_layers()
        if not layers:
            return None, None, None
        sigma = np.concatenate(
            [layer.params.sigma.ravel().astype(np.float64) for layer in layers],
        )
        return float(sigma.min()), float(sigma.mean()), float(sigma.max())

    def train(self, dataset: Dataset) -> list[TrainRecord]:
        """Run the epoch loop, recording losses and verification accuracy."""
        config = self.config
        records: list[TrainRecord] = []
        if config.epochs == 0:
            return records
        num_batches = dataset.count(Split.TRAINING) // config.batch_size
        if num_batches == 0:
            raise InvalidConfig("batch_size", "larger than the training split")
        self.kl_weight = config.resolve_kl_weight(num_batches)
        start = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            sums = np.zeros(5)
            correct = 0.0
            seen = 0
            for images, labels in batches(
                dataset,
                Split.TRAINING,
                config.batch_size,
                shuffle_seed=(config.seed, STREAM_SHUFFLE, epoch),
                augment=config.augment,
                prefetch=config.prefetch,
            ):
                loss = self.train_step(images, labels)
                sums += (
                    loss.l_cen,
                    loss.l_unc,
                    loss.kl_term,
                    loss.nll_term,
                    loss.total,
                )
                correct += self.last_accuracy * labels.shape[0]
                seen += labels.shape[0]
            means = sums / num_batches
            l_cen, l_unc, kl_term, nll_term, total = (float(v) for v in means)
            sigma_min, sigma_mean, sigma_max = self._sigma_range()
            records.append(
                TrainRecord(
                    kind=RecordKind.EPOCH,
                    epoch=epoch,
                    step=self.step_index,
                    l_cen=l_cen,
                    l_unc=l_unc,
                    kl_term=kl_term,
                    nll_term=nll_term,
                    total=total,
                    train_accuracy=correct / seen,
                    sigma_min=sigma_min,
                    sigma_mean=sigma_mean,
                    sigma_max=sigma_max,
                    wall_time=time.perf_counter() - start,
                ),
            )
            _LOGGER.info(
                "[epoch %s/%s] l_cen %.4f, l_unc %.4f, train accuracy %.4f",
                epoch,
                config.epochs,
                l_cen,
                l_unc,
                correct / seen,
            )
            if epoch % config.eval_every == 0:
                self._record_eval(dataset, epoch, start, records)
        return records

    def _record_eval(
        self,
        dataset: Dataset,
        epoch: int,
        start: float,
        records: list[TrainRecord],
    ) -> None:
        if dataset.count(Split.PUBLIC_TEST) == 0:
            _LOGGER.warning("[epoch %s] Verification split is empty, skipped", epoch)
            return
        result = evaluate(self.model, dataset, Split.PUBLIC_TEST, EvalMode.MEAN)
        records.append(
            TrainRecord(
                kind=RecordKind.EVAL,
                epoch=epoch,
                step=self.step_index,
                verification_accuracy=result.accuracy,
                wall_time=time.perf_counter() - start,
            ),
        )
        _LOGGER.info(
            "[epoch %s] Verification accuracy %.4f (%s/%s)",
            epoch,
            result.accuracy,
            result.n_correct,
            result.n_total,
        )


def train_step(
    model: PartialBayesNet,
    batch: tuple[Tensor, Tensor],
    config: TrainConfig,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Run one alternating update on batch."""
    images, labels = batch
    return Trainer(model, config, rng=rng).train_step(images, labels)


def train(
    model: PartialBayesNet,
    dataset: Dataset,
    config: TrainConfig,
) -> list[TrainRecord]:
    """Train model on the training split of dataset."""
    return Trainer(model, config).train(dataset)


def initial_model(
    arch: ArchSpec,
    placement: PlacementConfig,
    config: TrainConfig,
) -> PartialBayesNet:
    """Model drawn from the init stream of config.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, STREAM_INIT]))
    return build(arch, placement, rng, rho_init=config.rho_init)
