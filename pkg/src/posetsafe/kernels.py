"""Backend selection for the projection kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded. Set ``POSETSAFE_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _pykernels

_compiled = None
if os.environ.get("POSETSAFE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"

project_heads = _impl.project_heads
project_heads_backward = _impl.project_heads_backward


def available_backends():
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get_backend(name):
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available") from None
