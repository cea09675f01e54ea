"""Hot numeric kernels for the segmentation networks.

Two interchangeable backends provide the same five functions:

* ``numba`` -- @njit loop kernels (default when numba imports cleanly)
* ``numpy`` -- pure-NumPy fallback built on sliding windows + BLAS

Select with the ``NODULESEG_BACKEND`` environment variable or
:func:`set_backend`. Both backends are deterministic run-to-run on a fixed
machine; their float32 results differ only by accumulation order (relative
~1e-6). ``benchmarks/kernel_bench.py`` compares their throughput.
"""

import os
import warnings

from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}

try:
    from . import numba_backend

    _BACKENDS["numba"] = numba_backend
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    numba_backend = None

_active_name = None
_impl = None


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    """Name of the backend currently serving kernel calls."""
    return _active_name


def set_backend(name):
    """Switch kernel implementations; returns the previous backend name."""
    global _active_name, _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    prev = _active_name
    _active_name = name
    _impl = _BACKENDS[name]
    return prev


def _default_backend():
    env = os.environ.get("NODULESEG_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            warnings.warn(
                f"NODULESEG_BACKEND={env!r} not available, falling back to numpy",
                stacklevel=2,
            )
            return "numpy"
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


set_backend(_default_backend())


def _as_f32(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.float32)


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution: (B,C,H,W) x (O,C,3,3) + (O,) -> (B,O,H,W)."""
    return _impl.conv3x3_forward(_as_f32(x), _as_f32(w), _as_f32(b))


def conv3x3_input_grad(dy, w):
    """Gradient of conv3x3_forward w.r.t. its input."""
    return _impl.conv3x3_input_grad(_as_f32(dy), _as_f32(w))


def conv3x3_param_grad(x, dy):
    """Gradients of conv3x3_forward w.r.t. weights and bias: -> (dw, db)."""
    return _impl.conv3x3_param_grad(_as_f32(x), _as_f32(dy))


def maxpool2_forward(x):
    """2x2/stride-2 max pool; ties resolve to the first window position.

    Returns (pooled, idx) where idx holds the flat in-window argmax
    (row-major: tl=0, tr=1, bl=2, br=3) needed by the backward pass.
    """
    return _impl.maxpool2_forward(_as_f32(x))


def maxpool2_backward(dy, idx):
    """Scatter pooled gradients back to the 2x-larger input grid."""
    return _impl.maxpool2_backward(_as_f32(dy), idx)
