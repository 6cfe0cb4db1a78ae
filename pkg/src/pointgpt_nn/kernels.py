"""Backend selection for the geometry kernels.

The compiled extension is preferred; the numpy fallback is used when it
is missing or when the environment variable ``POINTGPT_NN_PURE`` is set
to a non-empty value other than ``0``.
"""
import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_force_pure = os.environ.get("POINTGPT_NN_PURE", "") not in ("", "0")

if _compiled is not None and not _force_pure:
    backend = _compiled
    BACKEND = "cython"
else:
    backend = _fallback
    BACKEND = "python"

HAVE_COMPILED = _compiled is not None


def get_backend(name=None):
    """Return a kernel module by name (``"cython"``/``"python"``) or the active one."""
    if name is None:
        return backend
    if name == "python":
        return _fallback
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
