"""Geometric hot kernels with a compiled backend and a pure-Python fallback.

The compiled extension (``_ckernels``, built from Cython) is used when it
imports; otherwise the numpy/stdlib reference in ``_pykernels`` is used.
Set ``DRIVESIM_PURE_PYTHON=1`` to force the fallback. Both backends give
bit-identical results, so recorded episodes do not depend on the backend.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("DRIVESIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

obb_overlap = _impl.obb_overlap
project_point = _impl.project_point
rasterize_rects = _impl.rasterize_rects

__all__ = ["BACKEND", "obb_overlap", "project_point", "rasterize_rects"]
