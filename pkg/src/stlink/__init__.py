"""Spatio-temporal forecasting with spatially-enhanced rotary attention and a
memory-retrieval feed-forward network, on a small NumPy autodiff core."""

from ._kernels import BACKEND as kernel_backend
from .tensor import GradTape, Tensor, dtype_scope

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "dtype_scope", "kernel_backend", "__version__"]
