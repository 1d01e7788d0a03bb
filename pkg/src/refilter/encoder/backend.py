"""Attention kernel backend selection.

The compiled Cython kernels are used when the extension was built; otherwise
the numpy reference implementation is selected. Override with the
``REFILTER_BACKEND`` environment variable (``cython`` or ``numpy``) or by
passing a backend object explicitly to the encoder functions.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import kernels_numpy

try:
    from . import _kernels_cy
except ImportError:
    _kernels_cy = None

_BACKENDS = {"numpy": kernels_numpy}
if _kernels_cy is not None:
    _BACKENDS["cython"] = _kernels_cy


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str | None = None):
    """Resolve a backend module by name, env override, or availability."""
    if name is None:
        name = os.environ.get("REFILTER_BACKEND", "").strip().lower() or None
    if name is None:
        name = "cython" if "cython" in _BACKENDS else "numpy"
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ConfigError(
            f"unknown attention backend {name!r}; available: {available_backends()}"
        ) from None
