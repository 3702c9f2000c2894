"""Oracles shared by the tests."""

from collections.abc import Callable

import numpy as np

from partialbnn.nn_ops import ConvSpec, Tensor


def conv_oracle(x: Tensor, weight: Tensor, spec: ConvSpec) -> Tensor:
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out_h = (h + 2 * p - k) // s + 1
    out_w = (w + 2 * p - k) // s + 1
    out = np.zeros((n, spec.out_channels, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    total = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                total += (
                                    padded[b, ci, i * s + di, j * s + dj]
                                    * weight[o, ci, di, dj]
                                )
                    out[b, o, i, j] = total
    return out


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central differences of f with respect to every entry of x, in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad
