"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``TAVP_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("TAVP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

splat_zbuffer = _impl.splat_zbuffer
bilinear_sample = _impl.bilinear_sample

__all__ = ["BACKEND", "splat_zbuffer", "bilinear_sample"]
