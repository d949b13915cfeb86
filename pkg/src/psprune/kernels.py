"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise
(or when ``PSPRUNE_PURE_PYTHON=1``) the numpy versions in ``_fallback``
are used. Both backends produce bit-identical results.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if not os.environ.get("PSPRUNE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

im2col = _impl.im2col
col2im = _impl.col2im
column_sums = _impl.column_sums
matmul_ordered = _impl.matmul_ordered


def compiled_available():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
