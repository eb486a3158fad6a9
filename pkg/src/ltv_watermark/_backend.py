"""Kernel selection: the compiled core when it imports, the NumPy fallback otherwise.

Set ``LTV_WATERMARK_BACKEND`` to ``python`` or ``compiled`` to force one.
"""

import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available():
    return sorted(_BACKENDS)


def get(name=None):
    """Return the kernel module for ``name`` (``None``/``"auto"`` picks the default)."""
    if name is None:
        name = os.environ.get("LTV_WATERMARK_BACKEND", "auto")
    if name == "auto":
        return _BACKENDS.get("compiled", _pykernels)
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available()}") from None


def default_name():
    return get().NAME
