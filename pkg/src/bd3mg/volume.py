"""Dense 3D volumes: bit-exact binary I/O, synthetic phantoms, degradation
noise, and quality metrics.

Conventions
-----------
A volume is a C-contiguous ``float64`` ndarray of shape ``(nz, ny, nx)``.
The flat index therefore runs x fastest, then y, then z, which is also the
payload order of the binary container.  Every entry must be finite.

All stochastic helpers are pure functions of their ``seed``.  They draw from
numpy's Philox (4x64) counter-based bit generator; normal variates use the
generator's ziggurat sampler.  Outputs are reproducible for a fixed numpy
major version, and statistical (not bitwise) properties are what downstream
checks rely on.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

VOLUME_MAGIC = b"BD3MGVOL"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A binary container violated the volume/PSF format."""


class Dims3(NamedTuple):
    """Voxel counts per axis; each component must be >= 1."""

    nx: int
    ny: int
    nz: int

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx) matching the flat x-fastest order."""
        return (self.nz, self.ny, self.nx)

    @property
    def count(self) -> int:
        return self.nx * self.ny * self.nz

    def validate(self) -> "Dims3":
        if min(self) < 1:
            raise ValueError(f"dimensions must be >= 1, got {self}")
        return self


@dataclass(frozen=True)
class SliceBlock:
    """Inclusive z-slice range [z_lo, z_hi]; the induced coordinate set is
    every voxel whose depth falls in the range."""

    z_lo: int
    z_hi: int

    def __post_init__(self):
        if not (0 <= self.z_lo <= self.z_hi):
            raise ValueError(f"invalid slice range [{self.z_lo}, {self.z_hi}]")

    @property
    def height(self) -> int:
        return self.z_hi - self.z_lo + 1

    def count(self, dims: Dims3) -> int:
        return dims.nx * dims.ny * self.height

    def check_within(self, dims: Dims3) -> "SliceBlock":
        if self.z_hi >= dims.nz:
            raise ValueError(f"block {self} exceeds nz={dims.nz}")
        return self


def dims_of(vol: np.ndarray) -> Dims3:
    nz, ny, nx = vol.shape
    return Dims3(nx, ny, nz)


def check_volume(vol) -> np.ndarray:
    """Validate and canonicalise a volume array (float64, C-order, finite)."""
    arr = np.ascontiguousarray(vol, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"volume must be 3-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("volume contains non-finite entries")
    return arr


@contextmanager
def _as_stream(source, mode):
    if hasattr(source, "read") or hasattr(source, "write"):
        yield source
    else:
        with open(source, mode) as fh:
            yield fh


def write_volume(vol, sink) -> None:
    """Write the binary container: 8-byte magic, u32 version, u32 nx/ny/nz,
    then the float64 payload, all little-endian, no padding or footer."""
    arr = check_volume(vol)
    d = dims_of(arr)
    with _as_stream(sink, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<III", d.nx, d.ny, d.nz))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_volume(source) -> np.ndarray:
    """Inverse of :func:`write_volume`; distinct errors for bad magic,
    version mismatch, truncation, and payload-length mismatch."""
    with _as_stream(source, "rb") as fh:
        magic = _read_exact(fh, 8, "header")
        if magic != VOLUME_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        nx, ny, nz = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if min(nx, ny, nz) < 1:
            raise FormatError(f"invalid dimensions ({nx}, {ny}, {nz})")
        n = nx * ny * nz
        payload = _read_exact(fh, 8 * n, "payload")
        if fh.read(1):
            raise FormatError("payload length mismatch: trailing data")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if not np.isfinite(data).all():
            raise FormatError("non-finite payload")
        return np.ascontiguousarray(data.reshape(nz, ny, nx))


def snr_db(reference, estimate) -> float:
    """20*log10(||reference|| / ||estimate - reference||); +inf when the
    estimate matches the reference exactly."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise ValueError("reference volume has zero norm")
    err_norm = float(np.linalg.norm(est - ref))
    if err_norm == 0.0:
        return math.inf
    return 20.0 * math.log10(ref_norm / err_norm)


def rel_dist(x, x_star) -> float:
    """Relative distance ||x - x_star|| / ||x_star||."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        raise ValueError("x_star has zero norm")
    return float(np.linalg.norm(a - b)) / b_norm


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are stable across platforms.
    return np.random.Generator(np.random.Philox(seed))


def phantom(dims: Dims3, seed: int) -> np.ndarray:
    """Deterministic synthetic ground truth in [0, 1]: a handful of smooth
    Gaussian blobs plus sharp-edged spheres and boxes.

    The mix exercises both smooth regions (where the edge-preserving penalty
    is nearly quadratic) and discontinuities.  Same (dims, seed) always
    produces bitwise-identical output.
    """
    dims = Dims3(*dims).validate()
    rng = _generator(seed)
    nz, ny, nx = dims.shape
    z, y, x = np.meshgrid(np.arange(nz, dtype=np.float64),
                          np.arange(ny, dtype=np.float64),
                          np.arange(nx, dtype=np.float64), indexing="ij")
    vol = np.zeros(dims.shape)

    extent = np.array([nz, ny, nx], dtype=np.float64)
    for _ in range(int(rng.integers(3, 7))):
        cz, cy, cx = rng.uniform(0.0, 1.0, 3) * (extent - 1)
        sz, sy, sx = rng.uniform(0.06, 0.22, 3) * extent + 0.75
        amp = rng.uniform(0.3, 1.0)
        vol += amp * np.exp(-0.5 * (((z - cz) / sz) ** 2
                                    + ((y - cy) / sy) ** 2
                                    + ((x - cx) / sx) ** 2))
    for _ in range(int(rng.integers(2, 5))):
        cz, cy, cx = rng.uniform(0.1, 0.9, 3) * (extent - 1)
        radius = rng.uniform(0.08, 0.25) * float(extent.min())
        amp = rng.uniform(0.4, 1.0)
        mask = (z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2 <= radius**2
        vol[mask] = amp
    for _ in range(int(rng.integers(1, 4))):
        lo = rng.uniform(0.05, 0.6, 3) * (extent - 1)
        hi = lo + rng.uniform(0.1, 0.35, 3) * extent
        amp = rng.uniform(0.4, 1.0)
        mask = ((z >= lo[0]) & (z <= hi[0]) & (y >= lo[1]) & (y <= hi[1])
                & (x >= lo[2]) & (x <= hi[2]))
        vol[mask] = amp

    return np.clip(vol, 0.0, 1.0)


def add_gaussian_noise(vol, sigma: float, seed: int) -> np.ndarray:
    """vol + sigma * g with g i.i.d. standard normal (Philox + ziggurat)."""
    arr = np.asarray(vol, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return arr.copy()
    return arr + sigma * _generator(seed).standard_normal(arr.shape)


def init_uniform(dims: Dims3, upper: float, seed: int) -> np.ndarray:
    """i.i.d. uniform entries on [0, upper]."""
    dims = Dims3(*dims).validate()
    if upper < 0:
        raise ValueError("upper must be nonnegative")
    if upper == 0:
        return np.zeros(dims.shape)
    return _generator(seed).uniform(0.0, upper, dims.shape)
