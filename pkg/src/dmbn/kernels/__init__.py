"""Backend selection for the hot convolution kernels.

The environment variable ``NPX_KERNELS`` picks the implementation:
``numba`` (default) or ``numpy``. If numba is requested but not
importable, the numpy fallback is used with a warning.
"""

import os
import warnings

ENV_VAR = "NPX_KERNELS"


def _load():
    choice = os.environ.get(ENV_VAR, "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"{ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba":
        try:
            from . import numba_ops as backend
            return backend
        except ImportError:
            warnings.warn("numba unavailable, falling back to numpy kernels")
            choice = "numpy"
    from . import numpy_ops as backend
    return backend


_backend = _load()

conv2d_forward = _backend.conv2d_forward
conv2d_grad_input = _backend.conv2d_grad_input
conv2d_grad_kernels = _backend.conv2d_grad_kernels


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _backend.NAME
