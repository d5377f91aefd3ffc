"""Independent evaluators the tests compare the package against.

Everything here is derived separately from the package: continuum
operators come from sympy doing the tensor calculus on the analytic
metric formulas, eigenvalues from scipy on dense loop-assembled
matrices, and the one-dimensional reference solver uses scipy sparse
factorizations.  None of it imports from cforge, so agreement is
evidence rather than tautology.
"""

import math

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
import sympy as sp

X, Y, Z = sp.symbols("x y z", real=True)
_TWO_PI = 2 * sp.pi


# ---------------------------------------------------------------------------
# analytic metric, mirrored from the fixture formulas


def bumpy_g_exprs(eps):
    """Diagonal components of the bumpy fixture metric as sympy exprs."""
    b1 = sp.sin(_TWO_PI * X + sp.Rational(13, 10)) \
        * sp.cos(_TWO_PI * Y + sp.Rational(4, 10)) \
        + sp.Rational(1, 2) * sp.sin(_TWO_PI * Z + sp.Rational(21, 10))
    b2 = sp.cos(_TWO_PI * X + sp.Rational(22, 10)) \
        * sp.sin(_TWO_PI * Z + sp.Rational(7, 10)) \
        + sp.Rational(1, 2) * sp.cos(_TWO_PI * Y + sp.Rational(11, 10))
    b3 = sp.sin(_TWO_PI * Y + sp.Rational(2, 10)) \
        * sp.sin(_TWO_PI * Z + sp.Rational(19, 10)) \
        + sp.Rational(1, 2) * sp.cos(_TWO_PI * X + sp.Rational(5, 10))
    e = sp.Rational(eps) if isinstance(eps, int) else sp.nsimplify(eps)
    return [1 + e * b1, 1 + e * b2, 1 + e * b3]


class MetricOracle:
    """Continuum tensor calculus for a diagonal metric diag(g1, g2, g3)."""

    def __init__(self, g_diag=None):
        if g_diag is None:
            g_diag = [sp.Integer(1)] * 3
        self.vars = (X, Y, Z)
        self.g = sp.diag(*g_diag)
        self.g_inv = sp.diag(*[1 / gi for gi in g_diag])
        self.sqrt_det = sp.sqrt(g_diag[0] * g_diag[1] * g_diag[2])
        self.gamma = self._christoffel()

    def _christoffel(self):
        v = self.vars
        gam = [[[sp.Integer(0)] * 3 for _ in range(3)] for _ in range(3)]
        for k in range(3):
            for i in range(3):
                for j in range(3):
                    acc = sp.Integer(0)
                    for l in range(3):
                        acc += self.g_inv[k, l] * (
                            sp.diff(self.g[l, i], v[j])
                            + sp.diff(self.g[l, j], v[i])
                            - sp.diff(self.g[i, j], v[l]))
                    gam[k][i][j] = sp.simplify(acc / 2)
        return gam

    def scalar_curvature(self):
        v = self.vars
        ric = sp.zeros(3, 3)
        for i in range(3):
            for j in range(3):
                acc = sp.Integer(0)
                for k in range(3):
                    acc += sp.diff(self.gamma[k][i][j], v[k])
                    acc -= sp.diff(self.gamma[k][i][k], v[j])
                    for l in range(3):
                        acc += self.gamma[k][k][l] * self.gamma[l][i][j]
                        acc -= self.gamma[k][j][l] * self.gamma[l][i][k]
                ric[i, j] = acc
        r = sp.Integer(0)
        for i in range(3):
            for j in range(3):
                r += self.g_inv[i, j] * ric[i, j]
        return r

    def laplace_beltrami(self, u):
        v = self.vars
        acc = sp.Integer(0)
        for a in range(3):
            acc += sp.diff(
                self.sqrt_det * self.g_inv[a, a] * sp.diff(u, v[a]), v[a])
        return acc / self.sqrt_det

    def grad_oneform(self, w):
        """nabla_i w_j for a lowered one-form, as a 3x3 matrix."""
        v = self.vars
        out = sp.zeros(3, 3)
        for i in range(3):
            for j in range(3):
                acc = sp.diff(w[j], v[i])
                for k in range(3):
                    acc -= self.gamma[k][i][j] * w[k]
                out[i, j] = acc
        return out

    def conformal_killing(self, w):
        """LW_ij = nabla_i w_j + nabla_j w_i - (2/3) g_ij div w."""
        nab = self.grad_oneform(w)
        div = sp.Integer(0)
        for a in range(3):
            for b in range(3):
                div += self.g_inv[a, b] * nab[a, b]
        out = sp.zeros(3, 3)
        for i in range(3):
            for j in range(3):
                out[i, j] = nab[i, j] + nab[j, i] \
                    - sp.Rational(2, 3) * self.g[i, j] * div
        return out

    def half_lstar_l(self, w):
        """-(nabla^b LW)_a, the formal volume-adjoint composition."""
        v = self.vars
        lw = self.conformal_killing(w)
        out = []
        for a in range(3):
            acc = sp.Integer(0)
            for b in range(3):
                for c in range(3):
                    term = sp.diff(lw[a, c], v[b])
                    for d in range(3):
                        term -= self.gamma[d][b][a] * lw[d, c]
                        term -= self.gamma[d][b][c] * lw[a, d]
                    acc += self.g_inv[b, c] * term
            out.append(-acc)
        return out

    def tensor_norm2(self, t):
        acc = sp.Integer(0)
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    for d in range(3):
                        acc += self.g_inv[a, c] * self.g_inv[b, d] \
                            * t[a, b] * t[c, d]
        return acc


def lambdify_on_grid(expr):
    """Compile a sympy expression to a callable over coordinate arrays."""
    fn = sp.lambdify((X, Y, Z), expr, modules="numpy")

    def call(xs, ys, zs):
        out = fn(xs, ys, zs)
        return np.broadcast_to(np.asarray(out, dtype=float), xs.shape).copy()

    return call


# frozen smooth test fields, periodic on the unit box
U_EXPR = sp.Rational(13, 10) \
    + sp.Rational(1, 5) * sp.sin(_TWO_PI * X) * sp.cos(_TWO_PI * Y) \
    + sp.Rational(1, 10) * sp.sin(_TWO_PI * Z)

W_EXPRS = [
    sp.Rational(3, 10) * sp.sin(_TWO_PI * X)
    + sp.Rational(1, 10) * sp.cos(_TWO_PI * Y),
    sp.Rational(1, 5) * sp.sin(_TWO_PI * Y) * sp.cos(_TWO_PI * Z),
    sp.Rational(1, 4) * sp.cos(_TWO_PI * X)
    + sp.Rational(3, 20) * sp.sin(_TWO_PI * Z),
]


# ---------------------------------------------------------------------------
# dense eigenvalue oracle


def _roll_axis_matrix(n, axis, shift):
    """Permutation matrix for np.roll along one axis of an n^3 grid."""
    size = n ** 3
    idx = np.arange(size).reshape((n, n, n))
    rolled = np.roll(idx, shift, axis=axis).ravel()
    mat = scipy.sparse.csr_matrix(
        (np.ones(size), (idx.ravel(), rolled)), shape=(size, size))
    return mat


def dense_operator(g_diag_arrays, r_array, h):
    """Sparse matrix of 8 lap + R for a diagonal metric, flux form.

    Centered half-point coefficient averaging on the periodic grid, so
    the matrix is symmetric under the sqrt(det g) weight.  Returns
    (B, D) with B = 8 A + diag(sqrt_det R) and D = diag(sqrt_det); the
    Laplacian A carries the nonnegative sign.
    """
    g1, g2, g3 = [np.asarray(a, dtype=float) for a in g_diag_arrays]
    n = g1.shape[0]
    size = n ** 3
    sq = np.sqrt(g1 * g2 * g3)
    inv_diag = [1.0 / g1, 1.0 / g2, 1.0 / g3]
    A = scipy.sparse.csr_matrix((size, size))
    for axis in range(3):
        coef = sq * inv_diag[axis]  # sqrt_det * g^{aa}
        plus = 0.5 * (coef + np.roll(coef, -1, axis=axis))
        minus = 0.5 * (coef + np.roll(coef, 1, axis=axis))
        sp_plus = scipy.sparse.diags(plus.ravel())
        sp_minus = scipy.sparse.diags(minus.ravel())
        shift_p = _roll_axis_matrix(n, axis, -1)
        shift_m = _roll_axis_matrix(n, axis, 1)
        ident = scipy.sparse.identity(size)
        A = A + (sp_plus @ (ident - shift_p)
                 + sp_minus @ (ident - shift_m)) / h ** 2
    B = 8.0 * A + scipy.sparse.diags((sq * np.asarray(r_array)).ravel())
    D = scipy.sparse.diags(sq.ravel())
    return B, D


def dense_lowest_eigenvalue(g_diag_arrays, r_array, h, nev=1):
    """Smallest eigenvalues of 8 lap + R by direct dense solve."""
    B, D = dense_operator(g_diag_arrays, r_array, h)
    vals = scipy.linalg.eigh(
        B.toarray(), D.toarray(), eigvals_only=True,
        subset_by_index=[0, nev - 1])
    return np.asarray(vals)


# ---------------------------------------------------------------------------
# one-dimensional reference solver for the constant-w sweeps


def solve_lich_1d(tau_fn, k, n=1024, r_const=0.0, tol=1e-11, maxit=80):
    """Newton on 8 u'' ... = the x-only scalar equation with w = k.

    Returns the solution array on the periodic unit interval.  Used to
    pin the true growth rates of the sweep diagnostics independently of
    the package's three-dimensional solver.
    """
    h = 1.0 / n
    x = h * np.arange(n)
    tau2 = tau_fn(x) ** 2
    e = np.ones(n)
    lap = scipy.sparse.diags([e, -2 * e, e], [-1, 0, 1], (n, n)).tolil()
    lap[0, n - 1] = 1.0
    lap[n - 1, 0] = 1.0
    lap = (lap / h ** 2).tocsr()

    u = np.maximum((k ** 2 / np.maximum(tau2, 1e-30) * 1.5) ** (1.0 / 12.0),
                   1e-3)
    for _ in range(maxit):
        f = -8.0 * lap @ u + r_const * u + (2.0 / 3.0) * tau2 * u ** 5 \
            - k ** 2 * u ** -7
        jdiag = r_const + (10.0 / 3.0) * tau2 * u ** 4 + 7.0 * k ** 2 * u ** -8
        J = -8.0 * lap + scipy.sparse.diags(jdiag)
        du = scipy.sparse.linalg.spsolve(J.tocsc(), f)
        step = 1.0
        while np.any(u - step * du <= 0.0):
            step *= 0.5
        u = u - step * du
        if np.max(np.abs(du)) <= tol * np.max(u):
            break
    return x, u
