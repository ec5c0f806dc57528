"""Backend selection for the hot convolution kernels.

The compiled extension is preferred when it imported cleanly; setting the
environment variable ``BD3MG_NO_EXT=1`` before import forces the pure
NumPy/SciPy path (used by the benchmark to compare both).
"""

from __future__ import annotations

import os

from . import _kernels_np

_force_fallback = os.environ.get("BD3MG_NO_EXT", "") not in ("", "0")

if not _force_fallback:
    try:
        from . import _core as _impl
        USING_COMPILED = True
    except ImportError:
        _impl = _kernels_np
        USING_COMPILED = False
else:
    _impl = _kernels_np
    USING_COMPILED = False

depthvar_correlate = _impl.depthvar_correlate
depthvar_correlate_adjoint = _impl.depthvar_correlate_adjoint


def backend_name() -> str:
    return "compiled" if USING_COMPILED else "numpy"
