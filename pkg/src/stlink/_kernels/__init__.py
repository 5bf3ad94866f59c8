"""Kernel dispatch: compiled Cython core when available, NumPy otherwise.

The environment variable ``STLINK_KERNELS`` forces a backend: ``py`` for the
NumPy reference, ``cy`` for the compiled core (raising if it is missing).
Both backends satisfy the same numerical contract, so which one is active
never changes results beyond float rounding, and the reference backend keeps
reductions in float64 exactly like the compiled one.
"""

from __future__ import annotations

import os

from . import _numpy_ref

_forced = os.environ.get("STLINK_KERNELS", "").strip().lower()

if _forced == "py":
    _impl = _numpy_ref
elif _forced == "cy":
    from . import _core as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy_ref

BACKEND: str = _impl.BACKEND

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
rope_fwd = _impl.rope_fwd
rope_bwd_x = _impl.rope_bwd_x
rope_bwd_theta = _impl.rope_bwd_theta

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "rope_fwd",
    "rope_bwd_x",
    "rope_bwd_theta",
]
