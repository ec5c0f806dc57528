"""Independent brute-force oracles for the test suite.

Everything here is implemented with plain scalar loops straight from the
mathematical definitions, deliberately sharing no code with the package's
vectorised / compiled paths.  Keep instances tiny; these are slow on purpose.
"""

from __future__ import annotations

import numpy as np


def naive_apply_H(kernels: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Six-nested-loop depth-variant correlation, kernel indexed by the
    output depth, zero padding outside the volume."""
    nz, ny, nx = x.shape
    _, kz, ky, kx = kernels.shape
    rz, ry, rx = (kz - 1) // 2, (ky - 1) // 2, (kx - 1) // 2
    out = np.zeros_like(x)
    for zo in range(nz):
        for yo in range(ny):
            for xo in range(nx):
                acc = 0.0
                for a in range(kz):
                    for b in range(ky):
                        for c in range(kx):
                            zi = zo + a - rz
                            yi = yo + b - ry
                            xi = xo + c - rx
                            if 0 <= zi < nz and 0 <= yi < ny and 0 <= xi < nx:
                                acc += kernels[zo, a, b, c] * x[zi, yi, xi]
                out[zo, yo, xo] = acc
    return out


def naive_apply_Ht(kernels: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Adjoint by explicit scatter over the forward map's entries."""
    nz, ny, nx = v.shape
    _, kz, ky, kx = kernels.shape
    rz, ry, rx = (kz - 1) // 2, (ky - 1) // 2, (kx - 1) // 2
    out = np.zeros_like(v)
    for zo in range(nz):
        for yo in range(ny):
            for xo in range(nx):
                for a in range(kz):
                    for b in range(ky):
                        for c in range(kx):
                            zi = zo + a - rz
                            yi = yo + b - ry
                            xi = xo + c - rx
                            if 0 <= zi < nz and 0 <= yi < ny and 0 <= xi < nx:
                                out[zi, yi, xi] += kernels[zo, a, b, c] * v[zo, yo, xo]
    return out


def dense_H(kernels: np.ndarray, shape) -> np.ndarray:
    """Materialise the blur matrix column by column via the naive oracle."""
    nz, ny, nx = shape
    n = nz * ny * nx
    mat = np.zeros((n, n))
    e = np.zeros(shape)
    for j in range(n):
        e.flat[j] = 1.0
        mat[:, j] = naive_apply_H(kernels, e).ravel()
        e.flat[j] = 0.0
    return mat


def dense_diff_matrices(shape):
    """Dense forward-difference matrices (x, y, z) with a zero row at each
    far face; flat index runs x fastest, then y, then z."""
    nz, ny, nx = shape
    n = nz * ny * nx

    def idx(z, y, x):
        return x + nx * (y + ny * z)

    vx = np.zeros((n, n))
    vy = np.zeros((n, n))
    vz = np.zeros((n, n))
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                row = idx(z, y, x)
                if x < nx - 1:
                    vx[row, idx(z, y, x + 1)] = 1.0
                    vx[row, idx(z, y, x)] = -1.0
                if y < ny - 1:
                    vy[row, idx(z, y + 1, x)] = 1.0
                    vy[row, idx(z, y, x)] = -1.0
                if z < nz - 1:
                    vz[row, idx(z + 1, y, x)] = 1.0
                    vz[row, idx(z, y, x)] = -1.0
    return vx, vy, vz


def naive_eval_f(kernels, y, lam, eta, kappa, delta, x_min, x_max, x) -> float:
    """Straight-line scalar evaluation of the four-term criterion."""
    nz, ny, nx = x.shape
    hx = naive_apply_H(kernels, x)
    data = 0.0
    for z in range(nz):
        for yy in range(ny):
            for xx in range(nx):
                data += 0.5 * (hx[z, yy, xx] - y[z, yy, xx]) ** 2
    box = 0.0
    for value in x.ravel():
        if value < x_min:
            box += eta * (x_min - value) ** 2
        elif value > x_max:
            box += eta * (value - x_max) ** 2
    tv = 0.0
    for z in range(nz):
        for yy in range(ny):
            for xx in range(nx):
                dx = x[z, yy, xx + 1] - x[z, yy, xx] if xx < nx - 1 else 0.0
                dy = x[z, yy + 1, xx] - x[z, yy, xx] if yy < ny - 1 else 0.0
                tv += lam * np.sqrt(dx * dx + dy * dy + delta * delta)
    axial = 0.0
    for z in range(nz - 1):
        for yy in range(ny):
            for xx in range(nx):
                axial += kappa * (x[z + 1, yy, xx] - x[z, yy, xx]) ** 2
    return data + box + tv + axial


def naive_omega(x, delta) -> np.ndarray:
    """Half-quadratic weights from the definition, one scalar at a time."""
    nz, ny, nx = x.shape
    w = np.zeros_like(x)
    for z in range(nz):
        for yy in range(ny):
            for xx in range(nx):
                dx = x[z, yy, xx + 1] - x[z, yy, xx] if xx < nx - 1 else 0.0
                dy = x[z, yy + 1, xx] - x[z, yy, xx] if yy < ny - 1 else 0.0
                w[z, yy, xx] = 1.0 / np.sqrt(dx * dx + dy * dy + delta * delta)
    return w


def dense_majorant(kernels, anchor, lam, eta, kappa, delta) -> np.ndarray:
    """Dense curvature matrix H^T H + 2 eta I + lam (Vx^T W Vx + Vy^T W Vy)
    + 2 kappa Vz^T Vz with W = diag of the anchor's half-quadratic weights."""
    shape = anchor.shape
    h = dense_H(kernels, shape)
    vx, vy, vz = dense_diff_matrices(shape)
    w = np.diag(naive_omega(anchor, delta).ravel())
    n = h.shape[0]
    return (h.T @ h + 2.0 * eta * np.eye(n)
            + lam * (vx.T @ w @ vx + vy.T @ w @ vy)
            + 2.0 * kappa * (vz.T @ vz))


def block_indices(shape, z_lo, z_hi) -> np.ndarray:
    """Flat coordinate indices of a z-slice block."""
    nz, ny, nx = shape
    return np.arange(z_lo * ny * nx, (z_hi + 1) * ny * nx)


def fd_gradient_entry(f, x, index, rel_h=1e-6) -> float:
    """Central finite difference of a scalar function of a volume at one
    coordinate, step 1e-6 * (1 + |x_n|)."""
    h = rel_h * (1.0 + abs(x.flat[index]))
    xp = x.copy()
    xm = x.copy()
    xp.flat[index] += h
    xm.flat[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)
