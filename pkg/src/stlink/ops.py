"""Taped neural-net operations backed by the kernel layer.

Each op runs the forward kernel, and when a tape is active records a closure
that calls the matching backward kernel. Inputs of any rank are accepted;
kernels see a 2D row-major view over the trailing feature axis.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, accumulate_grad, active_tape, as_tensor


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax over the last axis (the only axis the kernels support)."""
    x = as_tensor(x)
    if axis not in (-1, x.data.ndim - 1):
        raise ValueError("softmax kernels operate on the last axis")
    if x.data.shape[-1] == 0:
        raise ValueError("softmax over a zero-length axis")
    shape = x.data.shape
    y2 = _kernels.softmax_fwd(_rows(x.data))
    out = Tensor(y2.reshape(shape))
    tape = active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def backward(g):
            gx = _kernels.softmax_bwd(y2, _rows(g))
            accumulate_grad(x, gx.reshape(shape))

        tape.record(out, backward)
    return out


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of x to zero mean / unit variance, then apply
    the learnable affine (gamma, beta), both shaped (D,)."""
    x = as_tensor(x)
    if x.data.shape[-1] == 0:
        raise ValueError("layer_norm over a zero-length axis")
    shape = x.data.shape
    x2 = _rows(x.data)
    y2, mean, rstd = _kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)
    out = Tensor(y2.reshape(shape))
    tape = active_tape()
    if tape is not None and (x.requires_grad or gamma.requires_grad or beta.requires_grad):
        out.requires_grad = True

        def backward(g):
            gx, dgamma, dbeta = _kernels.layernorm_bwd(x2, gamma.data, mean, rstd, _rows(g))
            if x.requires_grad:
                accumulate_grad(x, gx.reshape(shape))
            accumulate_grad(gamma, dgamma)
            accumulate_grad(beta, dbeta)

        tape.record(out, backward)
    return out


def gelu(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    x2 = _rows(x.data)
    out = Tensor(_kernels.gelu_fwd(x2).reshape(shape))
    tape = active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(x, _kernels.gelu_bwd(x2, _rows(g)).reshape(shape))

        tape.record(out, backward)
    return out


def rope_rotate(x, theta) -> Tensor:
    """Rotate adjacent feature pairs of x (..., D) by angles theta (Rm, D/2).

    The flattened row r of x uses angle row r % Rm, so one angle table covers
    any number of stacked batch/head copies as long as the position axis is
    the innermost leading axis. Differentiable in x and, when it requires
    grad, in theta.
    """
    x = as_tensor(x)
    theta = as_tensor(theta)
    shape = x.data.shape
    x2 = _rows(x.data)
    rm, half = theta.data.shape
    if x2.shape[1] != 2 * half or x2.shape[0] % rm != 0:
        raise ValueError(
            f"rope shapes disagree: x rows {x2.shape} vs theta {theta.data.shape}"
        )
    # kernels require matching dtypes across x and the angle tables
    cos = np.cos(theta.data).astype(x.data.dtype, copy=False)
    sin = np.sin(theta.data).astype(x.data.dtype, copy=False)
    out = Tensor(_kernels.rope_fwd(x2, cos, sin).reshape(shape))
    tape = active_tape()
    if tape is not None and (x.requires_grad or theta.requires_grad):
        out.requires_grad = True

        def backward(g):
            g2 = _rows(g)
            if x.requires_grad:
                accumulate_grad(x, _kernels.rope_bwd_x(g2, cos, sin).reshape(shape))
            if theta.requires_grad:
                accumulate_grad(theta, _kernels.rope_bwd_theta(x2, g2, cos, sin))

        tape.record(out, backward)
    return out


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be below 1")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * scale)
    tape = active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(x, g * keep * scale)

        tape.record(out, backward)
    return out
