"""Select the correlation kernel backend at import time.

``DISTSEG_BACKEND`` may be ``auto`` (default), ``cython`` or ``python``.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_choice = os.environ.get("DISTSEG_BACKEND", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ImportError(f"unknown DISTSEG_BACKEND {_choice!r}")

_compiled = None
if _choice != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _choice == "cython":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

NAME = "cython" if _compiled is not None else "python"
kernels = BACKENDS[NAME]


def use(name):
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global kernels, NAME
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}")
    kernels = BACKENDS[name]
    NAME = name
