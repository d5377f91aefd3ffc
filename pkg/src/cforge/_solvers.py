"""Low-level iterative solvers.

Everything here works on bare numpy arrays in the plain l2 inner product.
Weighted (volume-element) symmetry is handled by the callers, which
symmetrize their systems before handing them down, see grid_geometry.
"""

from __future__ import annotations

import numpy as np

from .errors import EigenSolveFailure, KrylovStagnation

__all__ = ["vdot", "l2", "pcg", "make_fft_precond", "lowest_pairs"]


def vdot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b).real)


def l2(a: np.ndarray) -> float:
    return float(np.sqrt(np.vdot(a, a).real))


def pcg(apply_op, b, precond=None, tol=1e-10, maxit=2000, x0=None,
        best_effort=False):
    """Preconditioned conjugate gradients for a symmetric positive system.

    apply_op and precond map arrays to arrays of the same shape.  Returns
    (x, relative_residual, iterations).  Raises KrylovStagnation when the
    iteration stalls, goes indefinite, or exhausts its budget, unless
    best_effort is set, in which case the iterate with the smallest
    residual seen so far comes back instead.
    """
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = x0.copy()
        r = b - apply_op(x)
    bnorm = l2(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0, 0
    z = precond(r) if precond is not None else r.copy()
    p = z.copy()
    rz = vdot(r, z)
    res = l2(r)
    best = res
    x_best = x.copy() if best_effort else None
    marker = res
    last_improve = 0

    def bail(reason):
        if best_effort:
            return x_best, best / bnorm, it
        raise KrylovStagnation(reason)

    it = 0
    for it in range(maxit):
        if res <= tol * bnorm:
            return x, res / bnorm, it
        Ap = apply_op(p)
        pAp = vdot(p, Ap)
        if pAp <= 0.0:
            return bail(
                f"indefinite direction at iteration {it} (pAp={pAp:.3e})"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = l2(r)
        if res < best:
            best = res
            if best_effort:
                x_best = x.copy()
        if res < 0.995 * marker:
            marker = res
            last_improve = it
        elif it - last_improve > 80:
            return bail(
                f"no progress for 80 iterations (residual {res / bnorm:.3e})"
            )
        z = precond(r) if precond is not None else r
        rz_new = vdot(r, z)
        if rz_new == 0.0 or rz == 0.0:
            # exact preconditioner or underflow: no usable direction left
            return x, res / bnorm, it + 1
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return bail(
        f"budget {maxit} exhausted (residual {res / bnorm:.3e}, tol {tol:.1e})"
    )


_SYMBOL_CACHE: dict = {}


def _lap7_symbol(n: int, h: float) -> np.ndarray:
    """Fourier symbol of the 7-point flat Laplacian on the periodic grid,
    laid out for rfftn: shape (n, n, n//2 + 1)."""
    key = (n, h)
    sym = _SYMBOL_CACHE.get(key)
    if sym is None:
        k = np.arange(n)
        s_full = (4.0 / h**2) * np.sin(np.pi * k / n) ** 2
        kr = np.arange(n // 2 + 1)
        s_half = (4.0 / h**2) * np.sin(np.pi * kr / n) ** 2
        sym = (
            s_full[:, None, None]
            + s_full[None, :, None]
            + s_half[None, None, :]
        )
        _SYMBOL_CACHE[key] = sym
    return sym


def make_fft_precond(n: int, h: float, c0: float, scale: float):
    """Inverse of c0 + scale * (flat 7-point Laplacian), applied spectrally.

    Acts on any array whose trailing three axes are the grid.  With c0 = 0
    the constant mode would divide by zero; it is clamped to the smallest
    nonzero symbol value, which is the right move for systems that are
    positive only off the constants.
    """
    sym = c0 + scale * _lap7_symbol(n, h)
    if sym.flat[0] <= 0.0:
        sym = sym.copy()
        positive = sym[sym > 0.0]
        sym.flat[0] = positive.min() if positive.size else 1.0

    def apply(r: np.ndarray) -> np.ndarray:
        rh = np.fft.rfftn(r, axes=(-3, -2, -1))
        rh /= sym
        return np.fft.irfftn(rh, s=r.shape[-3:], axes=(-3, -2, -1))

    return apply


def _orthonormalize(X: np.ndarray, apply_D, rng) -> None:
    """In-place modified Gram-Schmidt in the D inner product."""
    nev = X.shape[0]
    for i in range(nev):
        for j in range(i):
            c = vdot(X[j], apply_D(X[i]))
            X[i] -= c * X[j]
        nrm = np.sqrt(vdot(X[i], apply_D(X[i])))
        if nrm < 1e-14:
            X[i] = rng.standard_normal(X[i].shape)
            for j in range(i):
                c = vdot(X[j], apply_D(X[i]))
                X[i] -= c * X[j]
            nrm = np.sqrt(vdot(X[i], apply_D(X[i])))
        X[i] /= nrm


def lowest_pairs(
    apply_B,
    apply_D,
    precond,
    shape,
    nev,
    shift,
    rng,
    tol=1e-8,
    maxit=60,
    inner_tol=1e-10,
    inner_maxit=1500,
    nev_check=None,
    coarse_above=None,
    coarse_tol=1e-3,
):
    """Lowest nev eigenpairs of B y = lam D y by block inverse iteration.

    B must be symmetric and D positive, both in plain l2; shift must make
    B + shift D positive definite.  Rayleigh-Ritz on the block after each
    sweep.  A pair counts as converged when its eigen-residual is small or
    its Ritz value has stopped moving; the second clause matters when the
    block cuts through a degenerate cluster, where the vectors rotate
    freely forever but the values are exact.  Pairs whose value exceeds
    coarse_above only have to meet coarse_tol, for callers that merely
    locate the top of the block rather than resolve it.  Returns
    (lam, X, sweeps) with X of shape (nev,) + shape, D-orthonormal rows,
    lam ascending.
    """
    if nev_check is None:
        nev_check = nev
    X = rng.standard_normal((nev,) + tuple(shape))

    def apply_shifted(v):
        return apply_B(v) + shift * apply_D(v)

    _orthonormalize(X, apply_D, rng)
    worst = np.inf
    lam = lam_old = None
    locked = np.zeros(nev, dtype=bool)
    for sweep in range(1, maxit + 1):
        for i in range(nev):
            if locked[i]:
                continue
            rhs = apply_D(X[i])
            # a stalled inner solve still improves the subspace, so take
            # whatever pcg reached rather than aborting the sweep
            X[i], _, _ = pcg(
                apply_shifted, rhs, precond, inner_tol, inner_maxit,
                x0=X[i], best_effort=True,
            )
        _orthonormalize(X, apply_D, rng)
        BX = np.stack([apply_B(X[i]) for i in range(nev)])
        H = np.empty((nev, nev))
        for i in range(nev):
            for j in range(i, nev):
                H[i, j] = H[j, i] = vdot(X[i], BX[j])
        lam, S = np.linalg.eigh(H)
        X = np.tensordot(S.T, X, axes=(1, 0))
        BX = np.tensordot(S.T, BX, axes=(1, 0))
        worst = 0.0
        done = True
        locked[:] = False
        for i in range(nev_check):
            DXi = apply_D(X[i])
            ri = l2(BX[i] - lam[i] * DXi) / ((1.0 + abs(lam[i])) * l2(DXi))
            if lam_old is not None:
                drift = abs(lam[i] - lam_old[i]) / (1.0 + abs(lam[i]))
                ri = min(ri, drift)
            tol_i = tol
            if coarse_above is not None and lam[i] > coarse_above:
                tol_i = coarse_tol
            worst = max(worst, ri / tol_i)
            if sweep >= 3 and ri <= tol_i:
                locked[i] = True
            else:
                done = False
        if sweep >= 3 and done:
            return lam, X, sweep
        lam_old = lam
    raise EigenSolveFailure(
        f"eigen-residual stuck at {worst:.3e} times its tolerance "
        f"after {maxit} sweeps"
    )
