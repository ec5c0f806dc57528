"""The four-term restoration criterion, its gradient, block restrictions,
the per-block quadratic surrogate operator, and a certified gradient
Lipschitz bound.

Objective
---------
    f(x) = 1/2 ||H x - y||^2
         + eta  * sum_n dist([x_min, x_max], x_n)^2
         + lam  * sum_n sqrt((Dx x)_n^2 + (Dy x)_n^2 + delta^2)
         + kappa * ||Dz x||^2

where H is the depth-variant blur, and Dx/Dy/Dz are forward differences
with a zero row at the far face (so constants are in their null space).

Surrogate
---------
For an anchor x~ the curvature operator

    A(x~) = H^T H + 2*eta*Id
          + lam * (Dx^T diag(w) Dx + Dy^T diag(w) Dy)
          + 2*kappa * Dz^T Dz,
    w_n = 1 / sqrt((Dx x~)_n^2 + (Dy x~)_n^2 + delta^2),

majorizes the Hessian of every term: the data and axial terms enter exactly,
the box penalty has a 2*eta-Lipschitz gradient, and the edge-preserving term
uses the tangent quadratic of t -> sqrt(t^2 + delta^2) in t^2 (the weights w
are its half-quadratic curvatures).  Restricting A to a coordinate block S
(principal submatrix, applied matrix-free on a slab) yields the per-block
quadratic model

    Q_S(v, x~) = f(x~) + <g_S, v - x~_S> + 1/2 <v - x~_S, A_S (v - x~_S)>

which upper-bounds f as a function of the block for any anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blur
from .volume import Dims3, SliceBlock, dims_of


@dataclass(frozen=True)
class RegParams:
    """Weights of the restoration criterion; all strictly positive, with
    delta > 0 (smoothness of the edge-preserving term) and x_min < x_max."""

    lam: float = 0.1
    eta: float = 1.0
    kappa: float = 0.05
    delta: float = 0.05
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.eta, self.kappa, self.delta) <= 0:
            raise ValueError("lam, eta, kappa, delta must be strictly positive")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")


@dataclass
class Objective:
    """Immutable problem instance: PSF stack, observation, and weights."""

    psf: blur.PsfStack
    y: np.ndarray
    params: RegParams

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if dims_of(self.y) != self.psf.dims:
            raise ValueError("observation dims do not match PSF dims")
        if not np.isfinite(self.y).all():
            raise ValueError("observation contains non-finite entries")

    @property
    def dims(self) -> Dims3:
        return self.psf.dims


# -- forward-difference stencils (zero row at the far face) ------------------

def _dx(a):
    out = np.zeros_like(a)
    if a.shape[2] > 1:
        out[:, :, :-1] = a[:, :, 1:] - a[:, :, :-1]
    return out


def _dy(a):
    out = np.zeros_like(a)
    if a.shape[1] > 1:
        out[:, :-1, :] = a[:, 1:, :] - a[:, :-1, :]
    return out


def _dxT(w):
    out = np.zeros_like(w)
    n = w.shape[2]
    if n == 1:
        return out
    out[:, :, 0] = -w[:, :, 0]
    out[:, :, 1:-1] = w[:, :, :-2] - w[:, :, 1:-1]
    out[:, :, -1] = w[:, :, -2]
    return out


def _dyT(w):
    out = np.zeros_like(w)
    n = w.shape[1]
    if n == 1:
        return out
    out[:, 0, :] = -w[:, 0, :]
    out[:, 1:-1, :] = w[:, :-2, :] - w[:, 1:-1, :]
    out[:, -1, :] = w[:, -2, :]
    return out


def _dz_full(a):
    out = np.zeros_like(a)
    if a.shape[0] > 1:
        out[:-1] = a[1:] - a[:-1]
    return out


def _omega(p: RegParams, frag) -> np.ndarray:
    """Half-quadratic weights 1/sqrt(dx^2 + dy^2 + delta^2); in (0, 1/delta]."""
    return 1.0 / np.sqrt(_dx(frag) ** 2 + _dy(frag) ** 2 + p.delta**2)


def _box_excess(p: RegParams, frag) -> np.ndarray:
    """x - clamp(x); zero inside [x_min, x_max]."""
    return frag - np.clip(frag, p.x_min, p.x_max)


def eval_f(obj: Objective, x) -> float:
    """Full objective value; raises if the result is not finite."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if dims_of(x) != obj.dims:
        raise ValueError("volume dims do not match objective dims")
    p = obj.params
    resid = blur.apply_H(obj.psf, x) - obj.y
    data = 0.5 * float(np.vdot(resid, resid))
    exc = _box_excess(p, x)
    box = p.eta * float(np.vdot(exc, exc))
    tv = p.lam * float(np.sqrt(_dx(x) ** 2 + _dy(x) ** 2 + p.delta**2).sum())
    dz = _dz_full(x)
    axial = p.kappa * float(np.vdot(dz, dz))
    value = data + box + tv + axial
    if not np.isfinite(value):
        raise ValueError("objective evaluated to a non-finite value")
    return value


def _grad_rows(obj: Objective, frag, frag_z0: int, lo: int, hi: int) -> np.ndarray:
    """Gradient rows [lo, hi] computed from a z-fragment.

    The fragment must cover [lo - kz, hi + kz] intersected with the volume;
    rows inside that margin then agree exactly with the full-volume gradient.
    """
    p = obj.params
    nz = obj.dims.nz
    rz = (obj.psf.kdims.kz - 1) // 2

    # data term: residual rows [lo-rz, hi+rz], then the adjoint back to [lo, hi]
    o_lo, o_hi = max(0, lo - rz), min(nz - 1, hi + rz)
    resid = blur.apply_H_rows(obj.psf, frag, frag_z0, o_lo, o_hi) - obj.y[o_lo:o_hi + 1]
    g = blur.apply_Ht_rows(obj.psf, resid, o_lo, lo, hi)

    rows = frag[lo - frag_z0:hi - frag_z0 + 1]
    g += 2.0 * p.eta * _box_excess(p, rows)

    w = _omega(p, rows)
    g += p.lam * (_dxT(w * _dx(rows)) + _dyT(w * _dy(rows)))

    # axial term: dz rows [lo-1, hi] with the far-face zero at global nz-1
    n = hi - lo + 1
    dz = np.zeros((n + 1,) + frag.shape[1:])
    for t, z in enumerate(range(lo - 1, hi + 1)):
        if 0 <= z < nz - 1:
            dz[t] = frag[z + 1 - frag_z0] - frag[z - frag_z0]
    g += 2.0 * p.kappa * (dz[:-1] - dz[1:])
    return g


def grad_f(obj: Objective, x) -> np.ndarray:
    """Gradient of the full objective, same shape as x."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if dims_of(x) != obj.dims:
        raise ValueError("volume dims do not match objective dims")
    return _grad_rows(obj, x, 0, 0, obj.dims.nz - 1)


def _check_slab(obj: Objective, frag, frag_z0: int, block: SliceBlock):
    slab = blur.slab_support(obj.psf, block)
    if frag_z0 > slab.z_lo or frag_z0 + frag.shape[0] - 1 < slab.z_hi:
        raise ValueError(
            f"slab [{frag_z0}, {frag_z0 + frag.shape[0] - 1}] does not cover "
            f"the required support [{slab.z_lo}, {slab.z_hi}] of block {block}")


def grad_block(obj: Objective, x, block: SliceBlock, x_z0: int = 0) -> np.ndarray:
    """Restriction of the gradient to the block, flattened to |S|.

    ``x`` may be the full volume (default) or any z-fragment starting at
    global depth ``x_z0`` that covers the block's slab support.
    """
    frag = np.ascontiguousarray(x, dtype=np.float64)
    _check_slab(obj, frag, x_z0, block)
    return _grad_rows(obj, frag, x_z0, block.z_lo, block.z_hi).ravel()


class MajorantOperator:
    """Matrix-free action of the principal submatrix A_S(x~) for one block,
    with the half-quadratic weights cached at construction.

    Created per task and owned by one worker; ``anchor`` may be a slab
    (fragment starting at ``anchor_z0``) covering the block's slab support.
    The quadratic model value :func:`majorant_Q` additionally needs the full
    objective value at the anchor, so it requires a full-volume anchor.
    """

    def __init__(self, obj: Objective, anchor, block: SliceBlock, anchor_z0: int = 0):
        self.obj = obj
        self.block = block.check_within(obj.dims)
        self.anchor = np.ascontiguousarray(anchor, dtype=np.float64)
        self.anchor_z0 = anchor_z0
        _check_slab(obj, self.anchor, anchor_z0, block)
        rows = self.anchor[block.z_lo - anchor_z0:block.z_hi - anchor_z0 + 1]
        self.omega = _omega(obj.params, rows)
        self._anchor_rows = rows.copy()
        self.n = block.count(obj.dims)
        self._f_anchor = None
        self._g_anchor = None

    @property
    def _block_shape(self):
        d = self.obj.dims
        return (self.block.height, d.ny, d.nx)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A_S(x~) v: embed v on the block, apply the curvature operator,
        restrict back to the block."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"expected flat vector of length {self.n}, got {v.shape}")
        p = self.obj.params
        nz = self.obj.dims.nz
        blk = self.block
        vb = np.ascontiguousarray(v.reshape(self._block_shape))
        rz = (self.obj.psf.kdims.kz - 1) // 2

        # H^T H restricted: blur rows reached by the block, then gather back
        o_lo, o_hi = max(0, blk.z_lo - rz), min(nz - 1, blk.z_hi + rz)
        hv = blur.apply_H_rows(self.obj.psf, vb, blk.z_lo, o_lo, o_hi)
        out = blur.apply_Ht_rows(self.obj.psf, hv, o_lo, blk.z_lo, blk.z_hi)

        out += 2.0 * p.eta * vb
        out += p.lam * (_dxT(self.omega * _dx(vb)) + _dyT(self.omega * _dy(vb)))

        # 2*kappa * Dz^T Dz of the block-embedded vector, rows of the block:
        # dz at global z in [z_lo-1, z_hi] with zeros outside the embedding
        h = blk.height
        dz = np.zeros((h + 1,) + vb.shape[1:])
        if blk.z_lo - 1 >= 0:
            dz[0] = vb[0]
        dz[1:h] = vb[1:] - vb[:-1]
        if blk.z_hi < nz - 1:
            dz[h] = -vb[h - 1]
        out += 2.0 * p.kappa * (dz[:-1] - dz[1:])
        return out.ravel()

    # anchor-dependent pieces of the quadratic model, computed on demand
    def _anchor_data(self):
        if self._g_anchor is None:
            if self.anchor_z0 != 0 or self.anchor.shape[0] != self.obj.dims.nz:
                raise ValueError("quadratic model value requires a full-volume anchor")
            if not np.array_equal(
                    self.anchor[self.block.z_lo:self.block.z_hi + 1], self._anchor_rows):
                raise RuntimeError("anchor mutated after the weight cache was built")
            self._f_anchor = eval_f(self.obj, self.anchor)
            self._g_anchor = grad_block(self.obj, self.anchor, self.block)
        return self._f_anchor, self._g_anchor


def majorant_apply(maj: MajorantOperator, v) -> np.ndarray:
    return maj.apply(v)


def majorant_Q(maj: MajorantOperator, v) -> float:
    """Quadratic model value Q_S(v, x~) at a block iterate v (flat |S|)."""
    f0, g = maj._anchor_data()
    d = np.asarray(v, dtype=np.float64) - maj._anchor_rows.ravel()
    return f0 + float(g @ d) + 0.5 * float(d @ maj.apply(d))


# -- Lipschitz bound ----------------------------------------------------------

#: spectral norm bound of a 1D forward-difference operator, squared
_DIFF_NORM_SQ = 4.0


def lipschitz_bound(rho_hth: float, params: RegParams | None = None, *,
                    lam: float = None, eta: float = None,
                    kappa: float = None, delta: float = None) -> float:
    """L = rho(H^T H) + 2*eta + (lam/delta)*(4+4) + 2*kappa*4.

    Each forward-difference operator has squared spectral norm <= 4, the box
    penalty's gradient is 2*eta-Lipschitz, and the edge-preserving term's
    Hessian is bounded by (lam/delta) times the two in-slice differences.
    """
    if params is not None:
        lam, eta, kappa, delta = params.lam, params.eta, params.kappa, params.delta
    return (rho_hth + 2.0 * eta + (lam / delta) * 2.0 * _DIFF_NORM_SQ
            + 2.0 * kappa * _DIFF_NORM_SQ)


def operator_norm_bound(psf: blur.PsfStack) -> float:
    """||H||_1 * ||H||_inf, a cheap certified upper bound for rho(H^T H).

    ||H||_inf is the largest kernel absolute sum; ||H||_1 is bounded by the
    largest per-input-depth stack of neighbouring kernel page sums.
    """
    nz = psf.dims.nz
    kz = psf.kdims.kz
    rz = (kz - 1) // 2
    abs_k = np.abs(psf.kernels)
    hinf = float(abs_k.reshape(nz, -1).sum(axis=1).max())
    page = abs_k.sum(axis=(2, 3))  # (nz, kz)
    h1 = 0.0
    for zi in range(nz):
        total = 0.0
        for a in range(kz):
            zo = zi + rz - a
            if 0 <= zo < nz:
                total += page[zo, a]
        h1 = max(h1, total)
    return h1 * hinf


def rho_hth_estimate(psf: blur.PsfStack, iters: int = 50, seed: int = 0) -> float:
    """Upper bound for the spectral radius of H^T H.

    Power iteration (matrix-free, ``iters`` steps) inflated by 5%, capped by
    the analytic norm-product bound; if the iteration has not settled the
    norm bound alone is returned.
    """
    dims = psf.dims
    rng = np.random.Generator(np.random.Philox(seed))
    v = rng.uniform(0.1, 1.0, dims.shape)
    v /= np.linalg.norm(v)
    est = prev = 0.0
    for _ in range(iters):
        w = blur.apply_Ht(psf, blur.apply_H(psf, v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:  # H annihilates the iterate; restart deterministically
            v = rng.uniform(0.1, 1.0, dims.shape)
            v /= np.linalg.norm(v)
            continue
        prev, est = est, norm
        v = w / norm
    bound = operator_norm_bound(psf)
    converged = est > 0 and abs(est - prev) <= 1e-3 * est
    if not converged:
        return bound
    return min(1.05 * est, bound)


def lipschitz_estimate(obj: Objective, iters: int = 50, seed: int = 0) -> float:
    """Certified Lipschitz constant of the objective gradient."""
    return lipschitz_bound(rho_hth_estimate(obj.psf, iters, seed), obj.params)


def curvature_gap_diagnostic(obj: Objective, x_current, x_stale,
                             block: SliceBlock) -> tuple[float, float]:
    """Eigenvalue range of A_S(x_stale) - 0.5 * A_S(x_current).

    Diagnostic only (no pass/fail); dense materialisation, so keep the
    instance tiny (<= a few hundred block coordinates).
    """
    maj_stale = MajorantOperator(obj, np.asarray(x_stale, dtype=np.float64), block)
    maj_cur = MajorantOperator(obj, np.asarray(x_current, dtype=np.float64), block)
    n = maj_stale.n
    if n > 512:
        raise ValueError("diagnostic is restricted to tiny instances")
    gamma = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        gamma[:, j] = maj_stale.apply(e) - 0.5 * maj_cur.apply(e)
        e[j] = 0.0
    w = np.linalg.eigvalsh(0.5 * (gamma + gamma.T))
    return float(w[0]), float(w[-1])
