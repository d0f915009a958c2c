"""Kernel backends for the numerical core.

Two interchangeable implementations of one kernel interface:

* ``cython`` -- compiled extension (BLAS matrix products, fused loops for
  normalization and activations).  Present when the extension compiled.
* ``numpy`` -- pure-Python fallback on vectorized numpy.

The active backend is chosen once at import: ``cython`` when available,
else ``numpy``.  Override with ``ODMIXER_BACKEND=cython|numpy`` in the
environment, or at runtime with :func:`use` (used by the backend
benchmark and by tests that exercise both).

Within one backend every reduction runs in a fixed order (sequential over
the trailing axis for hand-written loops, the linked BLAS build's blocking
for matrix products), so repeat runs on the same machine and backend are
bit-identical.  The two backends may differ from each other in the last
few bits.
"""

import os

from ..errors import ConfigError
from . import numpy_kernels

_BACKENDS = {"numpy": numpy_kernels}

try:
    from . import _mixerkern

    _BACKENDS["cython"] = _mixerkern
except ImportError:
    _mixerkern = None


def available():
    """Names of the importable backends."""
    return sorted(_BACKENDS)


def active_name():
    return _ACTIVE.NAME


def kernels():
    """The module implementing the active kernel set."""
    return _ACTIVE


def use(name):
    """Switch the active backend; returns the previous backend's name."""
    global _ACTIVE
    if name not in _BACKENDS:
        raise ConfigError(f"unknown backend {name!r}; available: {available()}")
    previous = _ACTIVE.NAME
    _ACTIVE = _BACKENDS[name]
    return previous


def _default():
    env = os.environ.get("ODMIXER_BACKEND")
    if env:
        if env not in _BACKENDS:
            raise ConfigError(
                f"ODMIXER_BACKEND={env!r} but available backends are {available()}"
            )
        return _BACKENDS[env]
    return _BACKENDS.get("cython", numpy_kernels)


_ACTIVE = _default()
