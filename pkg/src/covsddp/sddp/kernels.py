"""Backend selection for the backward recursion.

The compiled kernel is used when it was built and ``COVSDDP_PURE_PYTHON``
is unset; otherwise the pure-Python loop runs.  Both take the same arrays
and return the same tuple.
"""

from __future__ import annotations

import os

from . import _backward_py

try:
    if os.environ.get("COVSDDP_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced by COVSDDP_PURE_PYTHON")
    from . import _backward_ext
except ImportError:
    _backward_ext = None

BACKENDS = {"python": _backward_py.backward_recursion}
if _backward_ext is not None:
    BACKENDS["cython"] = _backward_ext.backward_recursion

DEFAULT_BACKEND = "cython" if "cython" in BACKENDS else "python"


def compiled_available() -> bool:
    return "cython" in BACKENDS


def resolve_backend(name: str | None = None) -> str:
    """Concrete backend name for ``name`` (``None``/``"auto"`` pick the default)."""
    if name is None or name == "auto":
        return DEFAULT_BACKEND
    return name


def get_backend(name: str | None = None):
    name = resolve_backend(name)
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown or unavailable backend {name!r}; available: {sorted(BACKENDS)}"
        ) from None
