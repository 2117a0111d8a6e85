"""Kernel backend selection.

Two interchangeable backends provide the hot kernels (3x3 convolution and
2x2 max pooling): a compiled Cython extension ("native") and a numpy
fallback ("numpy").  In the default "auto" mode each call picks the
backend that measured faster for its problem size: the compiled loops win
for pooling and small channel counts, the numpy GEMM path wins for
channel-heavy convolutions (see benchmarks/bench_kernels.py).  The choice
is a pure function of the operand shapes, so runs stay deterministic.

``C2L_KERNELS`` (auto/native/numpy) sets the startup mode;
:func:`set_backend` switches at runtime.
"""

import os

from . import reference

_BACKENDS = {"numpy": reference}

try:
    from . import _native
except ImportError:
    _native = None
else:
    _BACKENDS["native"] = _native

# auto-mode crossover points, calibrated in benchmarks/bench_kernels.py
_SMALL_CHANNEL_PRODUCT = 16
_SMALL_CONV_MACS = 4_000_000

_VALID_MODES = ("auto", "numpy", "native")


def available_backends():
    return sorted(_BACKENDS)


def _initial_mode():
    requested = os.environ.get("C2L_KERNELS", "auto").lower()
    if requested not in _VALID_MODES:
        raise ValueError(
            f"C2L_KERNELS={requested!r} invalid; choices: {list(_VALID_MODES)}")
    if requested == "native" and _native is None:
        raise ValueError("C2L_KERNELS=native but the compiled backend is not built")
    return requested


def _default_backend():
    """The module auto mode would use for large problems (startup default)."""
    mode = _initial_mode()
    if mode == "native":
        return _BACKENDS["native"]
    return reference


_MODE = _initial_mode()


def set_backend(name):
    """Select the kernel mode: 'auto', 'numpy', or 'native'."""
    global _MODE
    if name not in _VALID_MODES:
        raise ValueError(f"unknown backend {name!r}; choices: {list(_VALID_MODES)}")
    if name == "native" and _native is None:
        raise ValueError("compiled backend is not built")
    _MODE = name


def active_backend():
    return _MODE


def get_backend(name):
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choices: {available_backends()}")
    return _BACKENDS[name]


def _conv_module(b, c, o, ho, wo):
    if _MODE != "auto":
        return _BACKENDS.get(_MODE, reference)
    if _native is None:
        return reference
    if c * o <= _SMALL_CHANNEL_PRODUCT:
        return _native
    if b * c * o * 9 * ho * wo <= _SMALL_CONV_MACS:
        return _native
    return reference


def _pool_module():
    if _MODE == "auto":
        return _native if _native is not None else reference
    return _BACKENDS.get(_MODE, reference)


def conv2d_forward(x, w, stride, padding):
    ho = (x.shape[2] + 2 * padding - 3) // stride + 1
    wo = (x.shape[3] + 2 * padding - 3) // stride + 1
    mod = _conv_module(x.shape[0], x.shape[1], w.shape[0], ho, wo)
    return mod.conv2d_forward(x, w, stride, padding)


def conv2d_backward_input(gout, w, stride, padding, h, width):
    mod = _conv_module(gout.shape[0], w.shape[1], gout.shape[1],
                       gout.shape[2], gout.shape[3])
    return mod.conv2d_backward_input(gout, w, stride, padding, h, width)


def conv2d_backward_kernel(gout, x, stride, padding):
    mod = _conv_module(gout.shape[0], x.shape[1], gout.shape[1],
                       gout.shape[2], gout.shape[3])
    return mod.conv2d_backward_kernel(gout, x, stride, padding)


def maxpool2x2_forward(x):
    return _pool_module().maxpool2x2_forward(x)


def maxpool2x2_backward(gout, idx):
    return _pool_module().maxpool2x2_backward(gout, idx)
