"""Pure-NumPy reference implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with an identical
signature and an identical numerical contract: 2D C-contiguous float32 or
float64 arrays, reductions accumulated in float64. The dispatch layer in
``__init__`` picks one implementation at import time; everything above it is
agnostic to the choice.
"""

from __future__ import annotations

import numpy as np

BACKEND = "py"


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax of x (R, D), max-shifted for stability."""
    shifted = x.astype(np.float64) - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """gx[r] = y[r] * (gy[r] - <gy[r], y[r]>), from the softmax Jacobian."""
    y64 = y.astype(np.float64)
    g64 = gy.astype(np.float64)
    dot = (g64 * y64).sum(axis=1, keepdims=True)
    return (y64 * (g64 - dot)).astype(y.dtype)


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Row-wise normalization of x (R, D); returns (y, mean, rstd) with the
    per-row statistics kept for the backward pass."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x64 - mean) * rstd * gamma.astype(np.float64) + beta.astype(np.float64)
    return (
        y.astype(x.dtype),
        mean[:, 0].astype(x.dtype),
        rstd[:, 0].astype(x.dtype),
    )


def layernorm_bwd(x, gamma, mean, rstd, gy):
    """Returns (gx, dgamma, dbeta). Standard three-term layer norm gradient."""
    x64 = x.astype(np.float64)
    g64 = gy.astype(np.float64)
    xhat = (x64 - mean.astype(np.float64)[:, None]) * rstd.astype(np.float64)[:, None]
    ggamma = g64 * gamma.astype(np.float64)
    m1 = ggamma.mean(axis=1, keepdims=True)
    m2 = (ggamma * xhat).mean(axis=1, keepdims=True)
    gx = (ggamma - m1 - xhat * m2) * rstd.astype(np.float64)[:, None]
    dgamma = (g64 * xhat).sum(axis=0)
    dbeta = g64.sum(axis=0)
    return gx.astype(x.dtype), dgamma.astype(x.dtype), dbeta.astype(x.dtype)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU."""
    x64 = x.astype(np.float64)
    inner = _GELU_C * (x64 + 0.044715 * x64**3)
    return (0.5 * x64 * (1.0 + np.tanh(inner))).astype(x.dtype)


def gelu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    inner = _GELU_C * (x64 + 0.044715 * x64**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x64**2)
    local = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * dinner
    return (gy.astype(np.float64) * local).astype(x.dtype)


def rope_fwd(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs of x (R, D) by per-row angles.

    cos/sin have shape (Rm, D/2); row r of x uses angle row r % Rm, so a
    single period table can serve a batch of stacked copies.
    """
    r, d = x.shape
    rm = cos.shape[0]
    x64 = x.astype(np.float64).reshape(r, d // 2, 2)
    reps = r // rm
    c = np.tile(cos.astype(np.float64), (reps, 1))
    s = np.tile(sin.astype(np.float64), (reps, 1))
    even = x64[:, :, 0] * c - x64[:, :, 1] * s
    odd = x64[:, :, 0] * s + x64[:, :, 1] * c
    return np.stack([even, odd], axis=2).reshape(r, d).astype(x.dtype)


def rope_bwd_x(gy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the rotated input: rotate gy by the negated angles."""
    return rope_fwd(gy, cos, -sin)


def rope_bwd_theta(x: np.ndarray, gy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the angles, accumulated over the stacked copies.

    d(out)/d(theta) rotates each pair by theta + pi/2, so
    g_theta = gy_even * (-x0 s - x1 c) + gy_odd * (x0 c - x1 s).
    """
    r, d = x.shape
    rm = cos.shape[0]
    x64 = x.astype(np.float64).reshape(r, d // 2, 2)
    g64 = gy.astype(np.float64).reshape(r, d // 2, 2)
    reps = r // rm
    c = np.tile(cos.astype(np.float64), (reps, 1))
    s = np.tile(sin.astype(np.float64), (reps, 1))
    per_row = g64[:, :, 0] * (-x64[:, :, 0] * s - x64[:, :, 1] * c) + g64[:, :, 1] * (
        x64[:, :, 0] * c - x64[:, :, 1] * s
    )
    return per_row.reshape(reps, rm, d // 2).sum(axis=0).astype(x.dtype)
