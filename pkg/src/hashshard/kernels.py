"""Kernel backend selection.

The compiled extension is used when importable; ``HASHSHARD_PURE=1`` forces
the numpy fallback. ``get_backend(name)`` returns either module explicitly,
which the tests and the benchmark use to compare the two.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _kernels as _ckernels
except ImportError:  # extension not built
    _ckernels = None


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        name = "python" if os.environ.get("HASHSHARD_PURE") else "auto"
    if name == "python":
        return _pykernels
    if name in ("cython", "compiled"):
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    if name == "auto":
        return _ckernels if _ckernels is not None else _pykernels
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    return _ckernels is not None


K = get_backend()
BACKEND = K.BACKEND
