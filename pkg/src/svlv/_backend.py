"""Backend selection: compiled core when available, pure Python otherwise.

Both backends draw identical uniform sequences and perform identical
floating-point work, so switching backends never changes results for a
given seed.  The compiled core packs sites into a single int64 and
therefore only handles d <= 3; higher dimensions transparently fall back.

Set SVLV_BACKEND=python to force the pure twin, SVLV_BACKEND=c to demand
the compiled one (raising if it failed to build).
"""

import os

from . import _core_py

try:
    from . import _core
except ImportError:
    _core = None

_FORCED = os.environ.get("SVLV_BACKEND", "").strip().lower()

if _FORCED in ("python", "py"):
    _default = _core_py
elif _FORCED in ("c", "compiled", "cython"):
    if _core is None:
        raise ImportError(
            "SVLV_BACKEND demands the compiled core but svlv._core is not built"
        )
    _default = _core
elif _FORCED:
    raise ImportError(f"unknown SVLV_BACKEND value {_FORCED!r}")
else:
    _default = _core if _core is not None else _core_py


MAX_PACKED_OFFSET = 64
MAX_COMPILED_WALKERS = 64


def backend_for(d, max_offset=0, n_walkers=0):
    """Backend module for a d-dimensional run.

    ``max_offset`` is the largest absolute offset coordinate the run will
    step by; the packed-int64 site encoding only supports d <= 3 and
    offsets up to MAX_PACKED_OFFSET per axis.  Walk systems additionally
    cap at MAX_COMPILED_WALKERS labels (one mask bit each).
    """
    if _default is not _core_py and (d > 3 or max_offset > MAX_PACKED_OFFSET
                                     or n_walkers > MAX_COMPILED_WALKERS):
        return _core_py
    return _default


def active_backend():
    return _default.BACKEND_NAME


def compiled_available():
    return _core is not None
