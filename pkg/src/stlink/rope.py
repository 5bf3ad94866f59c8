"""Rotary position embeddings: temporal, spatial, and the combined projection.

The temporal variant rotates every adjacent feature pair (x_{2i}, x_{2i+1})
by angle t * omega_i. The spatial variant rotates only the first d/2 features
(d/4 pairs) by node_scale * omega_p using the first d/4 base frequencies, and
passes the second half through verbatim. The combined projection concatenates
both rotated copies (length 2d) and maps back to d with a learned matrix.

Vector-level functions here are the reference forms used by tests; the
attention block applies the same math batched through ops.rope_rotate.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor, gather_rows


def rope_frequencies(d: int) -> np.ndarray:
    """Base frequencies omega_i = 10000^(-2i/d), length d/2, float64."""
    if d < 2 or d % 2 != 0:
        raise ValueError("head dimension must be even")
    i = np.arange(d // 2, dtype=np.float64)
    return 10000.0 ** (-2.0 * i / d)


def temporal_angles(positions, freqs: np.ndarray) -> np.ndarray:
    """Angle table (P, d/2): theta[p, i] = positions[p] * omega_i."""
    positions = np.asarray(positions, dtype=np.float64)
    return np.outer(positions, freqs)


def _rotate_rows(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    x2 = np.ascontiguousarray(x, dtype=np.float64).reshape(1, -1)
    th = np.ascontiguousarray(theta, dtype=np.float64).reshape(1, -1)
    return _kernels.rope_fwd(x2, np.cos(th), np.sin(th))[0]


def rope_temporal(x, t, freqs: np.ndarray) -> np.ndarray:
    """Rotate a d-vector's pairs by angles t * omega_i."""
    x = np.asarray(x, dtype=np.float64)
    return _rotate_rows(x, float(t) * freqs)


def rope_spatial(x, node: int, scale, freqs: np.ndarray) -> np.ndarray:
    """Rotate the first d/2 entries of a d-vector by node_scale * omega_p.

    scale is the per-node multiplier table (SpatialScale); the last d/2
    entries are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d % 4 != 0:
        raise ValueError("dimension must be divisible by 4 for the spatial rotation")
    n_in = scale.data if isinstance(scale, Tensor) else np.asarray(scale)
    theta = float(n_in[node]) * freqs[: d // 4]
    out = x.copy()
    out[: d // 2] = _rotate_rows(x[: d // 2], theta)
    return out


class PhiProjection:
    """Pair of (2d, d) matrices reducing the concatenated rotations."""

    def __init__(self, w_q: Tensor, w_k: Tensor):
        self.w_q = w_q
        self.w_k = w_k


def phi_project(x, t, node, proj: PhiProjection, scale, freqs: np.ndarray,
                which: str) -> np.ndarray:
    """concat(temporal rotation, spatial rotation) of a d-vector, times W."""
    if which == "query":
        w = proj.w_q
    elif which == "key":
        w = proj.w_k
    else:
        raise ValueError("which must be 'query' or 'key'")
    combined = np.concatenate([
        rope_temporal(x, t, freqs),
        rope_spatial(x, node, scale, freqs),
    ])
    return combined @ w.data.astype(np.float64)


def spatial_angles(n_in: Tensor, node_ids, freqs: np.ndarray) -> Tensor:
    """Taped angle table (L, d/4): theta[l, p] = n_in[node_ids[l]] * omega_p.

    Differentiable in n_in; freqs must already be the first d/4 entries.
    """
    selected = gather_rows(n_in, np.asarray(node_ids))
    omega = as_tensor(freqs.astype(n_in.data.dtype))
    return selected.reshape((-1, 1)) * omega.reshape((1, -1))
