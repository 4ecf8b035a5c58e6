"""Kernel backend selection.

The Cython extension ``_core`` is used when it imports; otherwise (or with
``TOPOMICRO_PURE=1`` in the environment) the pure-Python ``_pure`` module
provides the same functions.
"""
import os

from . import _pure

if os.environ.get("TOPOMICRO_PURE", "") not in ("", "0"):
    _impl = _pure
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _pure

BACKEND = "cython" if _impl is not _pure else "python"

sq_edt = _impl.sq_edt
label6 = _impl.label6
flood = _impl.flood
cubical_pairs = _impl.cubical_pairs

__all__ = ["BACKEND", "sq_edt", "label6", "flood", "cubical_pairs"]
