"""Kernel backend selection.

The compiled extension is used when importable, otherwise the numpy
fallback. :func:`use` switches the active backend process-wide; callers
always go through :func:`current` so a switch takes effect immediately.
"""

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _ckernels if _ckernels is not None else _pykernels


def available():
    return sorted(_BACKENDS)


def get(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ImportError(f"kernel backend {name!r} not available (have {available()})") from None


def use(name):
    """Make ``name`` (``"cython"`` or ``"python"``) the active backend; returns the previous name."""
    global _active
    prev = _active.NAME
    _active = get(name)
    return prev


def current():
    return _active


def for_degree(degree):
    """Active backend if it handles ``degree``; the compiled one is cubic-only."""
    if _active is _ckernels and _ckernels is not None and int(degree) != 3:
        return _pykernels
    return _active
