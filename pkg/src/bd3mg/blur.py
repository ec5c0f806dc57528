"""Depth-variant 3D Gaussian blur: PSF stack generation, matrix-free
application of the operator and its adjoint, slab support arithmetic, and
the binary PSF container.

Operator convention
-------------------
The kernel attached to depth z weights the *input neighbourhood of output
slice z* (row structure), with zero padding outside the volume.  Each
observed slice is therefore explained by exactly one kernel, and the adjoint
gathers with kernels indexed by the source (observation) depth.  Kernels
are anisotropic Gaussians, rotated by R = R_y(theta) @ R_z(phi), sampled on
the centered integer grid and normalised to unit sum.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels as _kern
from .volume import Dims3, FormatError, SliceBlock, _as_stream, _read_exact, dims_of

PSF_MAGIC = b"BD3MGPSF"
PSF_VERSION = 1

KERNEL_SUM_TOL = 1e-12


class KernelDims(NamedTuple):
    """Spatial kernel extent per axis; all odd and >= 1."""

    kx: int
    ky: int
    kz: int

    def validate(self) -> "KernelDims":
        if min(self) < 1 or any(k % 2 == 0 for k in self):
            raise ValueError(f"kernel dims must be odd and >= 1, got {self}")
        return self


@dataclass(frozen=True)
class ParamRanges:
    """Per-parameter [lo, hi] draw intervals for PSF generation.

    Defaults: standard deviations in [0.8, 2.5] voxels per axis, rotation
    angles in [0, pi].
    """

    sigma1: tuple[float, float] = (0.8, 2.5)
    sigma2: tuple[float, float] = (0.8, 2.5)
    sigma3: tuple[float, float] = (0.8, 2.5)
    phi: tuple[float, float] = (0.0, math.pi)
    theta: tuple[float, float] = (0.0, math.pi)

    def validate(self) -> "ParamRanges":
        for name in ("sigma1", "sigma2", "sigma3", "phi", "theta"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name}=[{lo}, {hi}] has lo > hi")
            if name.startswith("sigma") and lo <= 0:
                raise ValueError(f"sigma range {name} must be strictly positive")
        return self


@dataclass
class PsfStack:
    """One kernel per depth plus the (sigma1, sigma2, sigma3, phi, theta)
    record it was built from; kernels are nonnegative with unit sum."""

    dims: Dims3
    kdims: KernelDims
    kernels: np.ndarray  # (nz, kz, ky, kx)
    params: np.ndarray = field(default=None)  # (nz, 5)

    def __post_init__(self):
        self.dims = Dims3(*self.dims).validate()
        self.kdims = KernelDims(*self.kdims).validate()
        kx, ky, kz = self.kdims
        expected = (self.dims.nz, kz, ky, kx)
        self.kernels = np.ascontiguousarray(self.kernels, dtype=np.float64)
        if self.kernels.shape != expected:
            raise ValueError(f"kernel array shape {self.kernels.shape}, expected {expected}")
        if self.params is None:
            self.params = np.zeros((self.dims.nz, 5))
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.dims.nz, 5):
            raise ValueError("params must be one 5-float record per depth")
        sums = self.kernels.reshape(self.dims.nz, -1).sum(axis=1)
        if np.abs(sums - 1.0).max() > KERNEL_SUM_TOL:
            raise ValueError("kernels must sum to 1 within 1e-12")
        if self.kernels.min() < 0:
            raise ValueError("kernels must be nonnegative")


def gaussian_kernel(kdims: KernelDims, sigma1: float, sigma2: float, sigma3: float,
                    phi: float, theta: float) -> np.ndarray:
    """Rotated anisotropic Gaussian on the centered grid, unit sum.

    The quadratic form is u^T R^T diag(sigma^-2) R u with u = (ux, uy, uz).
    """
    kx, ky, kz = KernelDims(*kdims).validate()
    if min(sigma1, sigma2, sigma3) <= 0:
        raise ValueError("standard deviations must be strictly positive")
    cp, sp = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    rot_z = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    rot_y = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rot = rot_y @ rot_z
    quad = rot.T @ np.diag([sigma1**-2, sigma2**-2, sigma3**-2]) @ rot

    ux = np.arange(kx, dtype=np.float64) - (kx - 1) / 2
    uy = np.arange(ky, dtype=np.float64) - (ky - 1) / 2
    uz = np.arange(kz, dtype=np.float64) - (kz - 1) / 2
    uzg, uyg, uxg = np.meshgrid(uz, uy, ux, indexing="ij")
    q = (quad[0, 0] * uxg**2 + quad[1, 1] * uyg**2 + quad[2, 2] * uzg**2
         + 2.0 * (quad[0, 1] * uxg * uyg + quad[0, 2] * uxg * uzg
                  + quad[1, 2] * uyg * uzg))
    k = np.exp(-0.5 * q)
    return k / k.sum()


def generate_psf_stack(dims: Dims3, kdims: KernelDims, ranges: ParamRanges = None,
                       seed: int = 0) -> PsfStack:
    """Draw (sigma1, sigma2, sigma3, phi, theta) uniformly per depth and
    build the corresponding kernels; deterministic in the seed."""
    dims = Dims3(*dims).validate()
    kdims = KernelDims(*kdims).validate()
    if kdims.kz > 2 * dims.nz - 1:
        raise ValueError(f"kz={kdims.kz} exceeds 2*nz-1={2 * dims.nz - 1}")
    ranges = (ranges or ParamRanges()).validate()
    rng = np.random.Generator(np.random.Philox(seed))
    params = np.empty((dims.nz, 5))
    stack = np.empty((dims.nz, kdims.kz, kdims.ky, kdims.kx))
    for z in range(dims.nz):
        row = [rng.uniform(*ranges.sigma1), rng.uniform(*ranges.sigma2),
               rng.uniform(*ranges.sigma3), rng.uniform(*ranges.phi),
               rng.uniform(*ranges.theta)]
        params[z] = row
        stack[z] = gaussian_kernel(kdims, *row)
    return PsfStack(dims, kdims, stack, params)


def dirac_stack(dims: Dims3, kdims: KernelDims = KernelDims(1, 1, 1)) -> PsfStack:
    """Identity operator: every kernel is a single 1 at the kernel center.
    Parameter records are zeroed (no Gaussian generated them)."""
    dims = Dims3(*dims).validate()
    kdims = KernelDims(*kdims).validate()
    stack = np.zeros((dims.nz, kdims.kz, kdims.ky, kdims.kx))
    stack[:, (kdims.kz - 1) // 2, (kdims.ky - 1) // 2, (kdims.kx - 1) // 2] = 1.0
    return PsfStack(dims, kdims, stack)


def _check_dims(psf: PsfStack, vol: np.ndarray):
    if dims_of(vol) != psf.dims:
        raise ValueError(f"volume dims {dims_of(vol)} do not match PSF dims {psf.dims}")


def apply_H(psf: PsfStack, x) -> np.ndarray:
    """Depth-variant blur of a full volume; linear in x."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_dims(psf, x)
    return _kern.depthvar_correlate(x, psf.kernels, 0, 0, psf.dims.nz - 1)


def apply_Ht(psf: PsfStack, v) -> np.ndarray:
    """Exact adjoint: <apply_H(x), v> == <x, apply_Ht(v)> for all x, v."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    _check_dims(psf, v)
    return _kern.depthvar_correlate_adjoint(v, psf.kernels, 0, 0, psf.dims.nz - 1)


def apply_H_rows(psf: PsfStack, frag, frag_z0: int, out_lo: int, out_hi: int) -> np.ndarray:
    """Blur rows [out_lo, out_hi] from a z-fragment starting at global depth
    frag_z0.  Reads outside the fragment contribute zero; the caller must
    supply enough margin for the rows to match the full-volume result."""
    frag = np.ascontiguousarray(frag, dtype=np.float64)
    return _kern.depthvar_correlate(frag, psf.kernels, frag_z0, out_lo, out_hi)


def apply_Ht_rows(psf: PsfStack, frag, frag_z0: int, out_lo: int, out_hi: int) -> np.ndarray:
    frag = np.ascontiguousarray(frag, dtype=np.float64)
    return _kern.depthvar_correlate_adjoint(frag, psf.kernels, frag_z0, out_lo, out_hi)


def slab_support(psf: PsfStack, block: SliceBlock) -> SliceBlock:
    """Smallest z-range of the volume needed to evaluate the block's
    restricted gradient and curvature action: the block dilated by kz-1
    (two operator applications) plus 1 (axial difference stencil), clamped
    to the volume."""
    block.check_within(psf.dims)
    reach = psf.kdims.kz  # (kz - 1) + 1
    return SliceBlock(max(0, block.z_lo - reach),
                      min(psf.dims.nz - 1, block.z_hi + reach))


def write_psf(psf: PsfStack, sink) -> None:
    """Same container family as volumes: magic, u32 version, u32 nx/ny/nz,
    u32 kx/ky/kz, one 5-float64 parameter record per depth, then the kernel
    payloads in depth order (x fastest within each kernel)."""
    with _as_stream(sink, "wb") as fh:
        fh.write(PSF_MAGIC)
        fh.write(struct.pack("<I", PSF_VERSION))
        fh.write(struct.pack("<III", *psf.dims))
        fh.write(struct.pack("<III", *psf.kdims))
        fh.write(psf.params.astype("<f8", copy=False).tobytes())
        fh.write(psf.kernels.astype("<f8", copy=False).tobytes())


def read_psf(source) -> PsfStack:
    with _as_stream(source, "rb") as fh:
        magic = _read_exact(fh, 8, "header")
        if magic != PSF_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "header"))
        if version != PSF_VERSION:
            raise FormatError(f"unsupported version {version}")
        nx, ny, nz = struct.unpack("<III", _read_exact(fh, 12, "header"))
        kx, ky, kz = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if min(nx, ny, nz) < 1:
            raise FormatError(f"invalid dimensions ({nx}, {ny}, {nz})")
        if min(kx, ky, kz) < 1 or any(k % 2 == 0 for k in (kx, ky, kz)):
            raise FormatError(f"invalid kernel dimensions ({kx}, {ky}, {kz})")
        params = np.frombuffer(_read_exact(fh, 8 * 5 * nz, "parameter records"),
                               dtype="<f8").astype(np.float64).reshape(nz, 5)
        n_kernel = kx * ky * kz
        payload = _read_exact(fh, 8 * n_kernel * nz, "kernel payload")
        if fh.read(1):
            raise FormatError("payload length mismatch: trailing data")
        stack = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        stack = stack.reshape(nz, kz, ky, kx)
        return PsfStack(Dims3(nx, ny, nz), KernelDims(kx, ky, kz), stack, params)
