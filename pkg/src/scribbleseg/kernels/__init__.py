"""Backend dispatch for the convolution hot path.

The active backend is chosen once at import from the SCRIBBLESEG_BACKEND
environment variable ("numba" or "numpy"; default numba when importable)
and can be switched at runtime with set_backend(), which benchmarks and
tests use to compare the two paths.
"""

import os

from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}
try:
    from . import numba_impl
    _IMPLS["numba"] = numba_impl
except ImportError:  # pragma: no cover - numba is a hard dep, but keep the fallback honest
    numba_impl = None


def _default_backend():
    env = os.environ.get("SCRIBBLESEG_BACKEND", "").strip().lower()
    if env:
        if env not in _IMPLS:
            raise ValueError(
                f"SCRIBBLESEG_BACKEND={env!r}: expected one of {sorted(_IMPLS)}"
            )
        return env
    return "numba" if "numba" in _IMPLS else "numpy"


_active = _default_backend()


def available_backends():
    return sorted(_IMPLS)


def get_backend():
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}: expected one of {sorted(_IMPLS)}")
    _active = name


def conv2d(x, w, b, pad):
    return _IMPLS[_active].conv2d(x, w, b, pad)


def conv2d_input_grad(dy, w, pad):
    return _IMPLS[_active].conv2d_input_grad(dy, w, pad)


def conv2d_param_grad(x, dy, pad, kh, kw):
    return _IMPLS[_active].conv2d_param_grad(x, dy, pad, kh, kw)
