"""Reversible per-node instance normalization.

Statistics are recomputed per input window over the trailing axis (time, or
time-by-channel for hidden states), one scalar mean/variance per node, with a
learnable per-node affine. Population variance, so a constant row normalizes
to exactly beta. Built from taped primitives so gradients flow through the
statistics as well as the affine.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, power


class RevinParams:
    """Per-node affine (gamma, beta), both length K, plus eps."""

    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = gamma
        self.beta = beta
        self.eps = eps


class RevinStats:
    """Per-node mean and population variance, shapes (..., K, 1)."""

    def __init__(self, mean: Tensor, var: Tensor):
        self.mean = mean
        self.var = var


def _affine_view(params: RevinParams, ndim: int):
    # gamma/beta are (K,); give them a trailing axis to broadcast over time
    k = params.gamma.data.shape[0]
    shape = (1,) * (ndim - 2) + (k, 1)
    return params.gamma.reshape(shape), params.beta.reshape(shape)


def revin_normalize(x, params: RevinParams):
    """Normalize x (..., K, T) per node; returns (x_hat, stats).

    x_hat[..., k, t] = gamma_k * (x - mean_k) / sqrt(var_k + eps) + beta_k
    with mean/var taken over the trailing axis of each node's row.
    """
    x = as_tensor(x)
    if x.data.ndim < 2 or x.data.shape[-1] < 1:
        raise ValueError("revin_normalize expects (..., K, T) with T >= 1")
    gamma, beta = _affine_view(params, x.data.ndim)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = power(var + params.eps, -0.5)
    x_hat = centered * inv * gamma + beta
    return x_hat, RevinStats(mean, var)


def revin_denormalize(y_hat, stats: RevinStats, params: RevinParams):
    """Exact algebraic inverse: y = (y_hat - beta)/gamma * sqrt(var+eps) + mean."""
    y_hat = as_tensor(y_hat)
    if np.any(params.gamma.data == 0):
        raise ValueError("non-invertible affine: gamma has a zero entry")
    gamma, beta = _affine_view(params, y_hat.data.ndim)
    scale = power(stats.var + params.eps, 0.5)
    return (y_hat - beta) / gamma * scale + stats.mean
