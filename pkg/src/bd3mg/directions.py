"""Worker-side step kernels.

``mg_direction`` is the two-column memory-gradient step: minimise the block
quadratic model over span{-g, d_mem} via a <=2x2 pseudo-inverse solve.  The
ablation kernels strip features from it: ``gd_direction`` keeps only the
gradient with the scalar metric L*Id, ``cg_direction`` keeps the subspace but
swaps the curvature metric for L*Id, and ``mm_direction`` drops the subspace
and solves the full block system with conjugate gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .objective import MajorantOperator, Objective, grad_block
from .volume import SliceBlock

#: columns with norm <= PRUNE_TOL * (1 + ||g||) are dropped from the basis
PRUNE_TOL = 1e-14

#: relative eigenvalue cutoff of the pseudo-inverse
PINV_TOL = 1e-12


class MmSolveWarning(UserWarning):
    """The inner linear solve stopped before reaching its residual target."""


@dataclass
class StepInfo:
    """Diagnostics of one subspace solve."""

    increment: np.ndarray
    gram: np.ndarray
    rhs: np.ndarray
    coeffs: np.ndarray
    ncols: int


def pinv_sym(gram, tol_rel: float = PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a small symmetric matrix: invert the
    eigenvalues above tol_rel times the largest magnitude, zero the rest."""
    m = np.asarray(gram, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    w, vecs = np.linalg.eigh(m)
    amax = float(np.abs(w).max())
    if amax == 0.0:
        return np.zeros_like(m)
    inv = np.where(np.abs(w) > tol_rel * amax, np.divide(1.0, w, where=w != 0), 0.0)
    return (vecs * inv) @ vecs.T


def subspace_step(g: np.ndarray, d_mem, apply_metric) -> StepInfo:
    """Minimise <g, w> + 1/2 <w, A w> over w in span{-g, d_mem}.

    Solved as u = -(D^T A D)^+ D^T g, w = D u, after pruning negligible
    columns; an exactly zero gradient short-circuits to the zero step.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    zero = StepInfo(np.zeros_like(g), np.zeros((0, 0)), np.zeros(0), np.zeros(0), 0)
    if not g.any():
        return zero
    gnorm = float(np.linalg.norm(g))
    cols = []
    if gnorm > PRUNE_TOL * (1.0 + gnorm):
        cols.append(-g)
    if d_mem is not None:
        d_mem = np.asarray(d_mem, dtype=np.float64)
        if float(np.linalg.norm(d_mem)) > PRUNE_TOL * (1.0 + gnorm):
            cols.append(d_mem)
    if not cols:
        return zero
    basis = np.stack(cols, axis=1)
    metric_cols = np.stack([apply_metric(basis[:, j]) for j in range(basis.shape[1])],
                           axis=1)
    gram = basis.T @ metric_cols
    gram = 0.5 * (gram + gram.T)
    rhs = basis.T @ g
    coeffs = -pinv_sym(gram) @ rhs
    return StepInfo(basis @ coeffs, gram, rhs, coeffs, basis.shape[1])


def mg_direction(obj: Objective, x_slab, slab_z0: int, block: SliceBlock,
                 d_mem) -> np.ndarray:
    """Memory-gradient increment with the full curvature metric A_S(x)."""
    g = grad_block(obj, x_slab, block, slab_z0)
    maj = MajorantOperator(obj, x_slab, block, slab_z0)
    return subspace_step(g, d_mem, maj.apply).increment


def gd_direction(obj: Objective, x_slab, slab_z0: int, block: SliceBlock,
                 L: float) -> np.ndarray:
    """Plain scaled steepest descent, -g / L."""
    if L <= 0:
        raise ValueError("L must be strictly positive")
    g = grad_block(obj, x_slab, block, slab_z0)
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    return -g / L


def cg_direction(obj: Objective, x_slab, slab_z0: int, block: SliceBlock,
                 d_mem, L: float) -> np.ndarray:
    """Memory-gradient step with the scalar metric L*Id (Gram = L * D^T D)."""
    if L <= 0:
        raise ValueError("L must be strictly positive")
    g = grad_block(obj, x_slab, block, slab_z0)
    return subspace_step(g, d_mem, lambda v: L * v).increment


def cg_solve(apply_A, b: np.ndarray, tol: float, maxit: int):
    """Conjugate gradients for symmetric positive definite A.

    Returns (x, converged, iterations, relative_residual); on breakdown or
    budget exhaustion the best iterate seen so far is returned.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, True, 0, 0.0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    best, best_res = x.copy(), b_norm
    it = 0
    for it in range(1, maxit + 1):
        ap = apply_A(p)
        p_ap = float(p @ ap)
        if p_ap <= 0.0:  # loss of positive definiteness: stop at best iterate
            break
        alpha = rs / p_ap
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        res = rs_new**0.5
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol * b_norm:
            return x, True, it, res / b_norm
        p = r + (rs_new / rs) * p
        rs = rs_new
    return best, False, it, best_res / b_norm


def mm_direction(obj: Objective, x_slab, slab_z0: int, block: SliceBlock,
                 cg_tol: float = 1e-8, cg_maxit: int = 200) -> np.ndarray:
    """Full block model minimiser: solve A_S(x) d = -g iteratively."""
    if cg_tol <= 0:
        raise ValueError("cg_tol must be strictly positive")
    g = grad_block(obj, x_slab, block, slab_z0)
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    if not g.any():
        return np.zeros_like(g)
    maj = MajorantOperator(obj, x_slab, block, slab_z0)
    d, converged, iters, relres = cg_solve(maj.apply, -g, cg_tol, cg_maxit)
    if not converged:
        warnings.warn(
            f"inner solve stopped after {iters} iterations at relative "
            f"residual {relres:.3e} (target {cg_tol:.1e})", MmSolveWarning)
    return d
