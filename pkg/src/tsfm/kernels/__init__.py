"""Voxel-loop kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``TSFM_NUMBA=0`` to force the
numpy path (also used automatically when numba is not importable). Both
backends honour identical contracts; ``tests/test_kernels.py`` runs them side
by side.
"""

import os

from . import _numpy

USE_NUMBA = os.environ.get("TSFM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        from . import _numba as _impl
    except ImportError:  # pragma: no cover - numba missing
        USE_NUMBA = False
        _impl = _numpy
else:
    _impl = _numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

resample_linear = _impl.resample_linear
resample_nearest = _impl.resample_nearest
remap_lut = _impl.remap_lut
overlap_counts = _impl.overlap_counts
accumulate_tile = _impl.accumulate_tile

__all__ = [
    "BACKEND",
    "USE_NUMBA",
    "resample_linear",
    "resample_nearest",
    "remap_lut",
    "overlap_counts",
    "accumulate_tile",
]
