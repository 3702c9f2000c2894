"""Variational convolution weights.

A weight tensor is described by theta = (mu, rho) with sigma = softplus(rho);
samples are drawn with the reparameterization w = mu + sigma * epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import numpy.typing as npt

from .const import RHO_INIT
from .exceptions import InvalidConfig, ShapeMismatch
from .nn_ops import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class PriorKind(StrEnum):
    """Prior family."""

    UNIT_GAUSSIAN = "unit-gaussian"
    SCALED_GAUSSIAN = "scaled-gaussian"


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean Gaussian prior P(w)."""

    kind: PriorKind = PriorKind.UNIT_GAUSSIAN
    sigma_p: float = 1.0

    def __post_init__(self) -> None:
        """Validate prior."""
        if not self.sigma_p > 0:
            raise InvalidConfig("sigma_p", "must be positive")

    @classmethod
    def scaled(cls, sigma_p: float) -> PriorSpec:
        """Gaussian prior with standard deviation sigma_p."""
        if sigma_p == 1.0:
            return cls()
        return cls(kind=PriorKind.SCALED_GAUSSIAN, sigma_p=sigma_p)

    @property
    def sigma(self) -> float:
        """Effective prior standard deviation."""
        return 1.0 if self.kind is PriorKind.UNIT_GAUSSIAN else self.sigma_p


def softplus(rho: Tensor) -> Tensor:
    """Compute log(1 + exp(rho)) without overflow."""
    return np.maximum(rho, 0) + np.log1p(np.exp(-np.abs(rho)))


def sigmoid(rho: Tensor) -> Tensor:
    """Derivative of softplus."""
    return 0.5 * (1.0 + np.tanh(0.5 * rho))


@dataclass
class VariationalParams:
    """Variational posterior q(w | mu, rho) of one weight tensor."""

    mu: Tensor
    rho: Tensor
    last_epsilon: Tensor = field(init=False)
    last_weight: Tensor = field(init=False)
    sampled: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        """Check shapes and seed the sample cache with the mean."""
        if self.mu.shape != self.rho.shape:
            raise ShapeMismatch("rho", self.mu.shape, self.rho.shape)
        self.last_epsilon = np.zeros_like(self.mu)
        self.last_weight = self.mu.copy()

    @classmethod
    def initialize(
        cls,
        shape: tuple[int, ...],
        fan_in: int,
        rng: np.random.Generator,
        rho_init: float = RHO_INIT,
        dtype: npt.DTypeLike = np.float32,
    ) -> VariationalParams:
        """Fan-in scaled uniform means and a constant rho."""
        bound = 1.0 / math.sqrt(fan_in)
        mu = rng.uniform(-bound, bound, size=shape).astype(dtype)
        rho = np.full(shape, rho_init, dtype=dtype)
        return cls(mu=mu, rho=rho)

    @property
    def shape(self) -> tuple[int, ...]:
        """Weight shape."""
        return tuple(self.mu.shape)

    @property
    def sigma(self) -> Tensor:
        """Standard deviation softplus(rho)."""
        return softplus(self.rho)

    def compose(self, epsilon: Tensor) -> Tensor:
        """Reparameterized weight mu + sigma * epsilon."""
        return (self.mu + self.sigma * epsilon).astype(self.mu.dtype, copy=False)

    def is_current(self) -> bool:
        """Whether last_weight was drawn from the present mu and rho."""
        return self.sampled and np.array_equal(
            self.compose(self.last_epsilon),
            self.last_weight,
        )

    def astype(self, dtype: npt.DTypeLike) -> VariationalParams:
        """Copy with every tensor cast to dtype."""
        other = VariationalParams(mu=self.mu.astype(dtype), rho=self.rho.astype(dtype))
        other.last_epsilon = self.last_epsilon.astype(dtype)
        other.last_weight = self.last_weight.astype(dtype)
        other.sampled = self.sampled
        return other


def sample_weights(
    params: VariationalParams,
    rng: np.random.Generator | None,
    epsilon: Tensor | None = None,
) -> Tensor:
    """Draw epsilon ~ N(0, I), cache it with w2 = mu + sigma * epsilon, return w2.

    Passing epsilon forces the noise instead of drawing it.
    """
    if epsilon is None:
        if rng is None:
            raise InvalidConfig("rng", "required to draw fresh noise")
        epsilon = rng.standard_normal(params.shape).astype(params.mu.dtype)
    elif epsilon.shape != params.shape:
        raise ShapeMismatch("epsilon", params.shape, epsilon.shape)
    params.last_epsilon = np.asarray(epsilon, dtype=params.mu.dtype)
    params.last_weight = params.compose(params.last_epsilon)
    params.sampled = True
    return params.last_weight


def _gaussian_log_density(
    w: Tensor,
    mean: Tensor | float,
    std: Tensor | float,
) -> float:
    z = (np.asarray(w, dtype=np.float64) - mean) / std
    return float(np.sum(-HALF_LOG_2PI - np.log(std) - 0.5 * z * z))


def log_q(params: VariationalParams, w: Tensor) -> float:
    """Diagonal Gaussian log-density of w under q(w | theta)."""
    if w.shape != params.shape:
        raise ShapeMismatch("w", params.shape, w.shape)
    mean = params.mu.astype(np.float64)
    std = softplus(params.rho.astype(np.float64))
    return _gaussian_log_density(w, mean, np.broadcast_to(std, w.shape))


def log_prior(prior: PriorSpec, w: Tensor) -> float:
    """Log-density of w under the zero-mean Gaussian prior."""
    std = np.full(w.shape, prior.sigma, dtype=np.float64)
    return _gaussian_log_density(w, 0.0, std)


def kl_mc(params: VariationalParams, prior: PriorSpec, w_sampled: Tensor) -> float:
    """Single-sample estimate log q(w) - log P(w)."""
    return log_q(params, w_sampled) - log_prior(prior, w_sampled)


def kl_closed_form(params: VariationalParams, prior: PriorSpec) -> float:
    """Exact KL between the diagonal posterior and the Gaussian prior."""
    sigma = softplus(params.rho.astype(np.float64))
    mu = params.mu.astype(np.float64)
    sigma_p = prior.sigma
    return float(
        np.sum(
            np.log(sigma_p / sigma)
            + (sigma * sigma + mu * mu) / (2.0 * sigma_p * sigma_p)
            - 0.5,
        ),
    )


def log_q_grad_w(params: VariationalParams, w: Tensor) -> Tensor:
    """Partial of log q(w | theta) with respect to w at fixed theta."""
    sigma = params.sigma
    return -(w - params.mu) / (sigma * sigma)


def log_prior_grad_w(prior: PriorSpec, w: Tensor) -> Tensor:
    """Partial of log P(w) with respect to w."""
    return -w / (prior.sigma * prior.sigma)


def log_q_partials(params: VariationalParams, w: Tensor) -> tuple[Tensor, Tensor]:
    """Direct partials of log q(w | theta) for mu and rho at fixed w."""
    sigma = params.sigma
    diff = w - params.mu
    d_mu = diff / (sigma * sigma)
    d_rho = (-1.0 / sigma + diff * diff / (sigma * sigma * sigma)) * sigmoid(
        params.rho,
    )
    return d_mu, d_rho


def sigma_summary(params: VariationalParams) -> dict[str, float]:
    """Min, mean, max and std of sigma."""
    sigma = params.sigma.astype(np.float64)
    return {
        "min": float(sigma.min()),
        "mean": float(sigma.mean()),
        "max": float(sigma.max()),
        "std": float(sigma.std()),
    }
