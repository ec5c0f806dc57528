# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the depth-variant blur operator.

Both routines work on z-fragments so that workers can operate on a slab of
the volume without ever materialising the rest of it.  Coordinates are
global: ``frag_z0`` is the global depth of ``frag[0]`` and ``out_lo``/
``out_hi`` select the (inclusive) global output rows.  Reads that fall
outside the fragment contribute zero, which matches zero padding at the true
volume boundary whenever the caller supplies the required support margin.

The GIL is released around the loops so concurrent worker threads scale.
"""

import numpy as np


def depthvar_correlate(double[:, :, ::1] frag, double[:, :, :, ::1] kernels,
                       Py_ssize_t frag_z0, Py_ssize_t out_lo, Py_ssize_t out_hi):
    """out[zo] = sum_{a,b,c} kernels[zo,a,b,c] * x[zo+a-rz, y+b-ry, x+c-rx].

    The kernel attached to the *output* depth weights its input
    neighbourhood (row-structured operator).
    """
    cdef Py_ssize_t nzf = frag.shape[0], ny = frag.shape[1], nx = frag.shape[2]
    cdef Py_ssize_t kz = kernels.shape[1], ky = kernels.shape[2], kx = kernels.shape[3]
    cdef Py_ssize_t rz = (kz - 1) // 2, ry = (ky - 1) // 2, rx = (kx - 1) // 2
    cdef Py_ssize_t nout = out_hi - out_lo + 1
    out_arr = np.zeros((nout, ny, nx), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, zo, y, x, a, b, c, zf, yy, xx
    cdef double acc

    with nogil:
        for i in range(nout):
            zo = out_lo + i
            for y in range(ny):
                for x in range(nx):
                    acc = 0.0
                    for a in range(kz):
                        zf = zo + a - rz - frag_z0
                        if zf < 0 or zf >= nzf:
                            continue
                        for b in range(ky):
                            yy = y + b - ry
                            if yy < 0 or yy >= ny:
                                continue
                            for c in range(kx):
                                xx = x + c - rx
                                if xx < 0 or xx >= nx:
                                    continue
                                acc += kernels[zo, a, b, c] * frag[zf, yy, xx]
                    out[i, y, x] = acc
    return out_arr


def depthvar_correlate_adjoint(double[:, :, ::1] frag, double[:, :, :, ::1] kernels,
                               Py_ssize_t frag_z0, Py_ssize_t out_lo, Py_ssize_t out_hi):
    """Exact adjoint of :func:`depthvar_correlate`.

    Gathers from observation rows with the kernel indexed by the *source*
    (observation) depth, i.e. the column structure of the same operator.
    """
    cdef Py_ssize_t nzf = frag.shape[0], ny = frag.shape[1], nx = frag.shape[2]
    cdef Py_ssize_t nzk = kernels.shape[0]
    cdef Py_ssize_t kz = kernels.shape[1], ky = kernels.shape[2], kx = kernels.shape[3]
    cdef Py_ssize_t rz = (kz - 1) // 2, ry = (ky - 1) // 2, rx = (kx - 1) // 2
    cdef Py_ssize_t nout = out_hi - out_lo + 1
    out_arr = np.zeros((nout, ny, nx), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, zi, y, x, a, b, c, zo, zf, yy, xx
    cdef double acc

    with nogil:
        for i in range(nout):
            zi = out_lo + i
            for y in range(ny):
                for x in range(nx):
                    acc = 0.0
                    for a in range(kz):
                        zo = zi + rz - a
                        if zo < 0 or zo >= nzk:
                            continue
                        zf = zo - frag_z0
                        if zf < 0 or zf >= nzf:
                            continue
                        for b in range(ky):
                            yy = y + ry - b
                            if yy < 0 or yy >= ny:
                                continue
                            for c in range(kx):
                                xx = x + rx - c
                                if xx < 0 or xx >= nx:
                                    continue
                                acc += kernels[zo, a, b, c] * frag[zf, yy, xx]
                    out[i, y, x] = acc
    return out_arr
