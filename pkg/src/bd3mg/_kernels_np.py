"""Pure-NumPy/SciPy fallback for the depth-variant convolution kernels.

Same contract as the compiled routines in ``_core``: per output depth the
3D kernel is applied page by page as 2D correlations with zero padding.
Pages are accumulated in ascending kernel-z order, so results restricted to
any row set agree bit-for-bit between slab and full-volume invocations.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def depthvar_correlate(frag, kernels, frag_z0, out_lo, out_hi):
    frag = np.asarray(frag, dtype=np.float64)
    nzf, ny, nx = frag.shape
    _, kz, ky, kx = kernels.shape
    rz = (kz - 1) // 2
    out = np.zeros((out_hi - out_lo + 1, ny, nx))
    for i, zo in enumerate(range(out_lo, out_hi + 1)):
        for a in range(kz):
            zf = zo + a - rz - frag_z0
            if 0 <= zf < nzf:
                out[i] += ndimage.correlate(frag[zf], kernels[zo, a],
                                            mode="constant", cval=0.0)
    return out


def depthvar_correlate_adjoint(frag, kernels, frag_z0, out_lo, out_hi):
    frag = np.asarray(frag, dtype=np.float64)
    nzf, ny, nx = frag.shape
    nzk, kz, ky, kx = kernels.shape
    rz = (kz - 1) // 2
    out = np.zeros((out_hi - out_lo + 1, ny, nx))
    for i, zi in enumerate(range(out_lo, out_hi + 1)):
        for a in range(kz):
            zo = zi + rz - a
            zf = zo - frag_z0
            if 0 <= zo < nzk and 0 <= zf < nzf:
                # gather offsets are negated, i.e. a correlation with the
                # source slice's kernel page flipped in y and x
                page = np.ascontiguousarray(kernels[zo, a, ::-1, ::-1])
                out[i] += ndimage.correlate(frag[zf], page,
                                            mode="constant", cval=0.0)
    return out
