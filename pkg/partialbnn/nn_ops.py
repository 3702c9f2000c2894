"""Tensor primitives with hand-written backward passes.

Every op is a pure function of its inputs and preserves the input dtype, so the
same code runs in float32 for training and in float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .const import BN_EPSILON, BN_MOMENTUM
from .exceptions import (
    BatchNormDegenerate,
    EvalModeCache,
    InvalidConfig,
    ShapeMismatch,
)

Tensor = npt.NDArray[Any]

NCHW_RANK = 4
MIN_BN_BATCH = 2


def as_tensor(data: npt.ArrayLike, dtype: npt.DTypeLike = np.float32) -> Tensor:
    """Convert data to a contiguous tensor."""
    return np.ascontiguousarray(data, dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    """Square, bias-free convolution geometry."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        """Validate convolution geometry."""
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            if getattr(self, name) < 1:
                raise InvalidConfig(name, "must be a positive integer")
        if self.padding < 0:
            raise InvalidConfig("padding", "must be non-negative")
        if self.kernel_size % 2 == 0:
            raise InvalidConfig("kernel_size", "must be odd")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        """Weight shape (out, in, k, k)."""
        return (
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        )

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        """Output spatial size for an input of the given size."""
        out_h = (height + 2 * self.padding - self.kernel_size) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeMismatch(
                "spatial",
                f">= {self.kernel_size - 2 * self.padding}",
                (height, width),
            )
        return out_h, out_w


def _check_conv_operands(x: Tensor, weight: Tensor, spec: ConvSpec) -> None:
    if x.ndim != NCHW_RANK:
        raise ShapeMismatch("input rank", NCHW_RANK, x.ndim)
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatch("in_channels", spec.in_channels, x.shape[1])
    if weight.shape != spec.weight_shape:
        raise ShapeMismatch("weight", spec.weight_shape, weight.shape)


def _im2col(x: Tensor, spec: ConvSpec) -> Tensor:
    """Rows are output positions (n, oh, ow), columns are (c, kh, kw)."""
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    out_h, out_w = spec.output_size(h, w)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)


def conv2d_forward(x: Tensor, weight: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate an NCHW batch with an OIkk kernel."""
    _check_conv_operands(x, weight, spec)
    n, _, h, w = x.shape
    out_h, out_w = spec.output_size(h, w)
    cols = _im2col(x, spec)
    out = cols @ weight.reshape(spec.out_channels, -1).T
    return np.ascontiguousarray(
        out.reshape(n, out_h, out_w, spec.out_channels).transpose(0, 3, 1, 2),
    )


def conv2d_backward(
    grad_output: Tensor,
    x: Tensor,
    weight: Tensor,
    spec: ConvSpec,
) -> tuple[Tensor, Tensor]:
    """Gradients of sum(grad_output * conv(x, weight)) for x and weight."""
    _check_conv_operands(x, weight, spec)
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    out_h, out_w = spec.output_size(h, w)
    expected = (n, spec.out_channels, out_h, out_w)
    if grad_output.shape != expected:
        raise ShapeMismatch("grad_output", expected, grad_output.shape)

    grad_rows = grad_output.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    cols = _im2col(x, spec)
    grad_weight = (grad_rows.T @ cols).reshape(spec.weight_shape)

    grad_cols = (grad_rows @ weight.reshape(spec.out_channels, -1)).reshape(
        n,
        out_h,
        out_w,
        c,
        k,
        k,
    )
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_cols.dtype)
    for i in range(k):
        for j in range(k):
            grad_padded[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += (
                grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_input = np.ascontiguousarray(grad_padded[:, :, p : p + h, p : p + w])
    return grad_input, grad_weight


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def initial(
        cls,
        channels: int,
        dtype: npt.DTypeLike = np.float32,
    ) -> BatchNormState:
        """Identity normalization for the given channel count."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        """Channel count."""
        return int(self.gamma.shape[0])


@dataclass(frozen=True)
class BatchNormCache:
    """Values kept from a batch norm forward pass."""

    training: bool
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor


def _channel(v: Tensor) -> Tensor:
    return v.reshape(1, -1, 1, 1)


def batchnorm_forward(
    x: Tensor,
    state: BatchNormState,
    training: bool,
    update_running: bool = True,
) -> tuple[Tensor, BatchNormCache]:
    """Normalize per channel with batch (training) or running (eval) statistics.

    Running statistics use the biased batch variance and are updated in place,
    so arrays shared with checkpoints stay linked.
    """
    if x.ndim != NCHW_RANK:
        raise ShapeMismatch("input rank", NCHW_RANK, x.ndim)
    if x.shape[1] != state.channels:
        raise ShapeMismatch("channels", state.channels, x.shape[1])
    if training:
        if x.shape[0] < MIN_BN_BATCH:
            raise BatchNormDegenerate(
                f"training batch norm needs at least {MIN_BN_BATCH} samples, "
                f"got {x.shape[0]}",
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    x_hat = (x - _channel(mean)) * _channel(inv_std)
    out = _channel(state.gamma) * x_hat + _channel(state.beta)
    return out.astype(x.dtype, copy=False), BatchNormCache(
        training=training,
        x_hat=x_hat,
        inv_std=inv_std,
        gamma=state.gamma,
    )


def batchnorm_backward(
    grad_output: Tensor,
    cache: BatchNormCache,
) -> tuple[Tensor, Tensor, Tensor]:
    """Exact gradients of batch-statistics normalization."""
    if not cache.training:
        raise EvalModeCache("batch norm backward requires a training-mode cache")
    if grad_output.shape != cache.x_hat.shape:
        raise ShapeMismatch("grad_output", cache.x_hat.shape, grad_output.shape)
    axes = (0, 2, 3)
    m = grad_output.shape[0] * grad_output.shape[2] * grad_output.shape[3]
    grad_beta = grad_output.sum(axis=axes)
    grad_gamma = (grad_output * cache.x_hat).sum(axis=axes)
    grad_x_hat = grad_output * _channel(cache.gamma)
    grad_input = (
        _channel(cache.inv_std)
        / m
        * (
            m * grad_x_hat
            - _channel(grad_x_hat.sum(axis=axes))
            - cache.x_hat * _channel((grad_x_hat * cache.x_hat).sum(axis=axes))
        )
    )
    return grad_input.astype(grad_output.dtype, copy=False), grad_gamma, grad_beta


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    return np.maximum(x, 0)


def relu_backward(grad_output: Tensor, x: Tensor) -> Tensor:
    """Mask the gradient where the input is not positive."""
    return grad_output * (x > 0)


def affine_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Compute x @ weight + bias."""
    if x.ndim != 2:  # noqa: PLR2004
        raise ShapeMismatch("input rank", 2, x.ndim)
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch("inner", weight.shape[0], x.shape[1])
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatch("bias", (weight.shape[1],), bias.shape)
    return x @ weight + bias


def affine_backward(
    grad_output: Tensor,
    x: Tensor,
    weight: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients for input, weight and bias."""
    if grad_output.shape != (x.shape[0], weight.shape[1]):
        raise ShapeMismatch(
            "grad_output",
            (x.shape[0], weight.shape[1]),
            grad_output.shape,
        )
    return grad_output @ weight.T, x.T @ grad_output, grad_output.sum(axis=0)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dimensions, NCHW to NC."""
    if x.ndim != NCHW_RANK:
        raise ShapeMismatch("input rank", NCHW_RANK, x.ndim)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(
    grad_output: Tensor,
    input_shape: tuple[int, ...],
) -> Tensor:
    """Spread the pooled gradient evenly over the spatial map."""
    _, _, h, w = input_shape
    grad = grad_output[:, :, None, None] / (h * w)
    return np.ascontiguousarray(
        np.broadcast_to(grad, input_shape),
        dtype=grad_output.dtype,
    )


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
