"""Periodic uniform 3-grid, metric data, and the discrete operators on it.

Scalar fields are (n, n, n) arrays.  One-forms carry a leading component
axis (3, n, n, n).  Symmetric 2-tensors store their six independent
components (6, n, n, n) in the order SYM below.  Everything is periodic;
stencils wrap via np.roll.

The Laplace-Beltrami operator follows the nonnegative sign convention
Delta u = -(1/sqrt g) d_i(sqrt g g^{ij} d_j u), discretized in flux form so
that it is exactly self-adjoint in the volume-weighted inner product and
kills constants exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._solvers import lowest_pairs, make_fft_precond, pcg, vdot
from .errors import GridMismatch, NonPositive, NonPositiveDefinite

# component order for symmetric 2-tensors
SYM = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
_SYM_POS = {(i, j): p for p, (i, j) in enumerate(SYM)}
_SYM_POS.update({(j, i): p for p, (i, j) in enumerate(SYM)})

# weight of the odd-parity guard inside the conformal Killing operator,
# see _dtilde below
GUARD_BETA = 0.05


def sym_index(i: int, j: int) -> int:
    return _SYM_POS[(i, j)]


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on a cube, n_axis nodes per axis."""

    n_axis: int
    box_length: float = 1.0

    def __post_init__(self):
        if self.n_axis < 4:
            raise ValueError("n_axis must be at least 4")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")

    @property
    def h(self) -> float:
        return self.box_length / self.n_axis

    @property
    def shape(self) -> tuple:
        return (self.n_axis,) * 3

    @cached_property
    def coords(self) -> tuple:
        ax = np.arange(self.n_axis) * self.h
        return tuple(np.meshgrid(ax, ax, ax, indexing="ij"))


def _as_grid_array(grid, values, lead=()):
    arr = np.asarray(values, dtype=float)
    want = tuple(lead) + grid.shape
    if arr.shape != want:
        if arr.ndim == 0:
            arr = np.full(want, float(arr))
        else:
            raise GridMismatch(f"expected shape {want}, got {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_grid_array(self.grid, self.values)

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.shape, float(c)))

    @classmethod
    def from_function(cls, grid, fn):
        x, y, z = grid.coords
        return cls(grid, np.broadcast_to(fn(x, y, z), grid.shape).copy())

    def copy(self):
        return ScalarField(self.grid, self.values.copy())


@dataclass
class OneFormField:
    grid: GridSpec
    components: np.ndarray  # (3, n, n, n), covariant components

    def __post_init__(self):
        self.components = _as_grid_array(self.grid, self.components, (3,))

    @classmethod
    def from_functions(cls, grid, fns):
        x, y, z = grid.coords
        comps = np.stack(
            [np.broadcast_to(f(x, y, z), grid.shape).copy() for f in fns]
        )
        return cls(grid, comps)

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros((3,) + grid.shape))

    def copy(self):
        return OneFormField(self.grid, self.components.copy())


@dataclass
class SymTensorField:
    grid: GridSpec
    components: np.ndarray  # (6, n, n, n) in SYM order

    def __post_init__(self):
        self.components = _as_grid_array(self.grid, self.components, (6,))

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros((6,) + grid.shape))

    def copy(self):
        return SymTensorField(self.grid, self.components.copy())


def same_grid(*objs) -> GridSpec:
    grid = objs[0].grid
    for o in objs[1:]:
        if o.grid != grid:
            raise GridMismatch(f"grids differ: {o.grid} vs {grid}")
    return grid


# ---------------------------------------------------------------------------
# shift and difference stencils


def _sh(u, a, k):
    """u sampled at x + k*e_a (periodic); a counts grid axes from the end."""
    return np.roll(u, -k, axis=a - 3)


def _dc(u, a, h):
    return (_sh(u, a, 1) - _sh(u, a, -1)) / (2.0 * h)


def _dtilde(u, a, h):
    """Centered difference plus an odd-parity guard.

    Every antisymmetric real stencil has a zero symbol at the alternating
    mode, which on an even grid would hand the conformal Killing operator a
    large spurious kernel.  The symmetric fourth-difference tail below has
    symbol (4*beta/h)(1-cos t)^2: it vanishes to third order at t=0, so
    second-order accuracy survives, and it is positive everywhere else, so
    the combined symbol never dies away from the constant mode.
    """
    d = (_sh(u, a, 1) - _sh(u, a, -1)) / (2.0 * h)
    g = (
        _sh(u, a, -2)
        - 4.0 * _sh(u, a, -1)
        + 6.0 * u
        - 4.0 * _sh(u, a, 1)
        + _sh(u, a, 2)
    ) * (GUARD_BETA / h)
    return d + g


def _dtilde_t(u, a, h):
    """Plain-l2 transpose of _dtilde: the centered part flips sign, the
    guard is symmetric and stays."""
    d = -(_sh(u, a, 1) - _sh(u, a, -1)) / (2.0 * h)
    g = (
        _sh(u, a, -2)
        - 4.0 * _sh(u, a, -1)
        + 6.0 * u
        - 4.0 * _sh(u, a, 1)
        + _sh(u, a, 2)
    ) * (GUARD_BETA / h)
    return d + g


def _to_mat(s6):
    m = np.empty((3, 3) + s6.shape[1:])
    for p, (i, j) in enumerate(SYM):
        m[i, j] = s6[p]
        if i != j:
            m[j, i] = s6[p]
    return m


def _to_sym(mat):
    return np.stack([mat[i, j] for (i, j) in SYM])


def _sym_inv_det(g6):
    g00, g01, g02, g11, g12, g22 = g6
    c00 = g11 * g22 - g12 * g12
    c01 = g02 * g12 - g01 * g22
    c02 = g01 * g12 - g02 * g11
    c11 = g00 * g22 - g02 * g02
    c12 = g01 * g02 - g00 * g12
    c22 = g00 * g11 - g01 * g01
    det = g00 * c00 + g01 * c01 + g02 * c02
    inv = np.stack([c00, c01, c02, c11, c12, c22]) / det
    return inv, det


# ---------------------------------------------------------------------------
# metric


class Metric:
    """Riemannian metric on a GridSpec with its derived quantities.

    Built through build_metric, which also precomputes the flux
    coefficients for the Laplacian and the Christoffel symbols.  Eigenvalue
    reports are cached on the instance, so reuse one Metric per geometry.
    """

    def __init__(self, grid, g, g_inv, sqrt_det, christoffel,
                 scalar_curvature):
        self.grid = grid
        self.g = g
        self.g_inv = g_inv
        self.sqrt_det = sqrt_det
        self.christoffel = christoffel  # (3, 6, n, n, n): [k, sym(i,j)]
        self.scalar_curvature = scalar_curvature
        self._g_mat = _to_mat(g)
        self._ginv_mat = _to_mat(g_inv)
        a6 = sqrt_det * g_inv
        self._ahalf = [
            0.5 * (a6[sym_index(a, a)] + _sh(a6[sym_index(a, a)], a, 1))
            for a in range(3)
        ]
        self._aoff = [
            (a, b, a6[sym_index(a, b)])
            for a in range(3)
            for b in range(a + 1, 3)
            if np.any(a6[sym_index(a, b)])
        ]
        self._yamabe = None
        self._ckv = {}

    @property
    def is_diagonal(self) -> bool:
        return not self._aoff


def _christoffel(grid, g_mat, ginv_mat):
    h = grid.h
    dg = np.empty((3, 3, 3) + grid.shape)
    for a in range(3):
        for i in range(3):
            for j in range(i, 3):
                dg[a, i, j] = dg[a, j, i] = _dc(g_mat[i, j], a, h)
    gam = np.zeros((3, 6) + grid.shape)
    for p, (i, j) in enumerate(SYM):
        for k in range(3):
            acc = np.zeros(grid.shape)
            for l in range(3):
                acc += ginv_mat[k, l] * (dg[i, l, j] + dg[j, l, i] - dg[l, i, j])
            gam[k, p] = 0.5 * acc
    return gam


def _ricci_scalar(grid, ginv6, sqrt_det, gam):
    h = grid.h
    # F_j = d_j ln sqrt(g) equals the contracted symbol analytically; using
    # the log derivative keeps the mixed-derivative term exactly symmetric,
    # since centered shifts commute
    lnsg = np.log(sqrt_det)
    F = np.stack([_dc(lnsg, a, h) for a in range(3)])
    ric6 = np.empty((6,) + grid.shape)
    for p, (i, j) in enumerate(SYM):
        t1 = np.zeros(grid.shape)
        for k in range(3):
            t1 += _dc(gam[k, p], k, h)
        t2 = _dc(F[i], j, h)
        t3 = np.zeros(grid.shape)
        for l in range(3):
            t3 += gam[l, p] * F[l]
        t4 = np.zeros(grid.shape)
        for k in range(3):
            for l in range(3):
                t4 += gam[k, sym_index(j, l)] * gam[l, sym_index(k, i)]
        ric6[p] = t1 - t2 + t3 - t4
    w = np.array([1.0, 2.0, 2.0, 1.0, 2.0, 1.0])
    return np.einsum("p,p...->...", w, ginv6 * ric6)


def build_metric(grid: GridSpec, g6, scalar_curvature=None) -> Metric:
    """Assemble a Metric from the six components of g in SYM order.

    Checks positive definiteness node by node through the leading principal
    minors.  scalar_curvature, when given, replaces the value computed from
    g; the Christoffel symbols and volume element always come from g.
    """
    g6 = _as_grid_array(grid, g6, (6,))
    g00, g01, _, g11, _, _ = g6
    m2 = g00 * g11 - g01 * g01
    ginv6, det = _sym_inv_det(g6)
    for minor, arr in ((1, g00), (2, m2), (3, det)):
        bad = np.flatnonzero(arr.reshape(-1) <= 0.0)
        if bad.size:
            raise NonPositiveDefinite(int(bad[0]), minor)
    sqrt_det = np.sqrt(det)
    g_mat = _to_mat(g6)
    ginv_mat = _to_mat(ginv6)
    gam = _christoffel(grid, g_mat, ginv_mat)
    if scalar_curvature is None:
        curv = _ricci_scalar(grid, ginv6, sqrt_det, gam)
    else:
        if isinstance(scalar_curvature, ScalarField):
            scalar_curvature = scalar_curvature.values
        curv = _as_grid_array(grid, scalar_curvature)
    return Metric(grid, g6, ginv6, sqrt_det, gam, curv)


def flat_metric(grid: GridSpec) -> Metric:
    g6 = np.zeros((6,) + grid.shape)
    g6[sym_index(0, 0)] = 1.0
    g6[sym_index(1, 1)] = 1.0
    g6[sym_index(2, 2)] = 1.0
    return build_metric(grid, g6)


# ---------------------------------------------------------------------------
# second-order operators


def _sg_lap(m: Metric, u: np.ndarray) -> np.ndarray:
    """sqrt(g) * Delta u in flux form.  Symmetric positive semidefinite in
    plain l2, exactly zero on constants."""
    h = m.grid.h
    acc = np.zeros_like(u)
    for a in range(3):
        flux = m._ahalf[a] * (_sh(u, a, 1) - u)
        acc += (flux - _sh(flux, a, -1)) / (h * h)
    for a, b, arr in m._aoff:
        gb = arr * (_sh(u, b, 1) - _sh(u, b, -1))
        acc += (_sh(gb, a, 1) - _sh(gb, a, -1)) / (4.0 * h * h)
        ga = arr * (_sh(u, a, 1) - _sh(u, a, -1))
        acc += (_sh(ga, b, 1) - _sh(ga, b, -1)) / (4.0 * h * h)
    return -acc


def laplace_beltrami(m: Metric, f: ScalarField) -> ScalarField:
    same_grid(m, f)
    return ScalarField(m.grid, _sg_lap(m, f.values) / m.sqrt_det)


def exterior_derivative(f: ScalarField) -> OneFormField:
    h = f.grid.h
    comps = np.stack([_dc(f.values, a, h) for a in range(3)])
    return OneFormField(f.grid, comps)


def _ck_gradient(m: Metric, W: np.ndarray) -> np.ndarray:
    """C_ij = D~_i W_j - Gamma^k_ij W_k as a full (3,3) tensor field."""
    h = m.grid.h
    C = np.empty((3, 3) + m.grid.shape)
    for i in range(3):
        for j in range(3):
            C[i, j] = _dtilde(W[j], i, h)
    for p, (i, j) in enumerate(SYM):
        low = np.zeros(m.grid.shape)
        for k in range(3):
            low += m.christoffel[k, p] * W[k]
        C[i, j] -= low
        if i != j:
            C[j, i] -= low
    return C


def _ck_gradient_t(m: Metric, T: np.ndarray) -> np.ndarray:
    """Plain-l2 transpose of _ck_gradient, tensors to one-forms."""
    h = m.grid.h
    out = np.empty((3,) + m.grid.shape)
    for k in range(3):
        acc = np.zeros(m.grid.shape)
        for i in range(3):
            acc += _dtilde_t(T[i, k], i, h)
        for p, (i, j) in enumerate(SYM):
            if i == j:
                acc -= m.christoffel[k, p] * T[i, j]
            else:
                acc -= m.christoffel[k, p] * (T[i, j] + T[j, i])
        out[k] = acc
    return out


def _p_apply(m: Metric, T: np.ndarray) -> np.ndarray:
    """Symmetrize and remove the metric trace; pointwise self-adjoint."""
    tr = np.einsum("ab...,ab...->...", m._ginv_mat, T)
    return T + np.swapaxes(T, 0, 1) - (2.0 / 3.0) * m._g_mat * tr


def _m2_apply(m: Metric, T: np.ndarray) -> np.ndarray:
    h3 = m.grid.h ** 3
    return h3 * m.sqrt_det * np.einsum(
        "ia...,ab...,bj...->ij...", m._ginv_mat, T, m._ginv_mat
    )


def _m1_apply(m: Metric, V: np.ndarray) -> np.ndarray:
    h3 = m.grid.h ** 3
    return h3 * m.sqrt_det * np.einsum("ab...,b...->a...", m._ginv_mat, V)


def _m1_inv_apply(m: Metric, V: np.ndarray) -> np.ndarray:
    h3 = m.grid.h ** 3
    return np.einsum("ab...,b...->a...", m._g_mat, V) / (h3 * m.sqrt_det)


def conformal_killing(m: Metric, w: OneFormField) -> SymTensorField:
    """LW_ij = grad_i W_j + grad_j W_i - (2/3)(div W) g_ij."""
    same_grid(m, w)
    C = _ck_gradient(m, w.components)
    return SymTensorField(m.grid, _to_sym(_p_apply(m, C)))


def _half_lstar_l_plain(m: Metric, W: np.ndarray) -> np.ndarray:
    """C^T M2 P C, the mass-weighted vector operator.

    Built as an exact product of transposes, so the plain-l2 pairing
    <op(W), V> reproduces (1/2)<LW, LV> in the volume inner product to
    rounding, and positivity is inherited rather than approximated.  The
    transpose of P applied to M2(LW) collapses to a factor 2 because LW is
    exactly symmetric and exactly g-traceless pointwise; that factor
    cancels the 1/2.
    """
    lw = _p_apply(m, _ck_gradient(m, W))
    return _ck_gradient_t(m, _m2_apply(m, lw))


def half_LstarL(m: Metric, w: OneFormField) -> OneFormField:
    """(1/2) L*L w with the upstairs index lowered back, i.e. the left side
    of the vector constraint up to sign."""
    same_grid(m, w)
    out = _m1_inv_apply(m, _half_lstar_l_plain(m, w.components))
    return OneFormField(m.grid, out)


# ---------------------------------------------------------------------------
# integrals and norms


def _values(f):
    return f.values if isinstance(f, ScalarField) else np.asarray(f)


def integrate(m: Metric, f) -> float:
    return float(m.grid.h ** 3 * np.sum(m.sqrt_det * _values(f)))


def lp_norm(m: Metric, f, p: float) -> float:
    return integrate(m, np.abs(_values(f)) ** p) ** (1.0 / p)


def sup_norm(f) -> float:
    arr = f.values if isinstance(f, ScalarField) else np.asarray(f)
    return float(np.max(np.abs(arr)))


def tensor_norm2(m: Metric, s: SymTensorField) -> ScalarField:
    """|s|^2 = g^{ia} g^{jb} s_ij s_ab, pointwise."""
    same_grid(m, s)
    smat = _to_mat(s.components)
    gsg = np.einsum(
        "ia...,ab...,bj...->ij...", m._ginv_mat, smat, m._ginv_mat
    )
    return ScalarField(m.grid, np.einsum("ij...,ij...->...", gsg, smat))


def oneform_norm2(m: Metric, v: OneFormField) -> ScalarField:
    same_grid(m, v)
    out = np.einsum(
        "ab...,a...,b...->...", m._ginv_mat, v.components, v.components
    )
    return ScalarField(m.grid, out)


def dirichlet_energy(m: Metric, f: ScalarField) -> float:
    """<Delta f, f> in the volume inner product; the discrete stand-in for
    the integral of |grad f|^2."""
    same_grid(m, f)
    return float(m.grid.h ** 3 * vdot(_sg_lap(m, f.values), f.values))


# ---------------------------------------------------------------------------
# spectral probes


@dataclass
class YamabeReport:
    sign: int
    lambda1: float
    iterations: int


def yamabe_sign(m: Metric, dead_band: float = 1e-6) -> YamabeReport:
    """Sign of the first eigenvalue of 8 Delta + R, cached on the metric.

    The eigenvalue sign classifies which zero-energy regimes are reachable,
    in place of the conformal invariant it discretizes.  |lambda_1| inside
    the dead band reports as zero.
    """
    if m._yamabe is not None:
        return m._yamabe
    sg = m.sqrt_det
    R = m.scalar_curvature
    shift = max(0.0, -float(R.min())) + 1.0

    def apply_b(u):
        return 8.0 * _sg_lap(m, u) + sg * R * u

    def apply_d(u):
        return sg * u

    n, h = m.grid.n_axis, m.grid.h
    trg = (
        m.g_inv[sym_index(0, 0)]
        + m.g_inv[sym_index(1, 1)]
        + m.g_inv[sym_index(2, 2)]
    )
    pre = make_fft_precond(
        n, h,
        c0=float(np.mean(sg * (R + shift))),
        scale=8.0 * float(np.mean(sg * trg)) / 3.0,
    )
    rng = np.random.default_rng(2203)
    lam, _, sweeps = lowest_pairs(
        apply_b, apply_d, pre, m.grid.shape, nev=2, shift=shift, rng=rng,
        tol=1e-8, maxit=80, nev_check=1,
    )
    lam1 = float(lam[0])
    if abs(lam1) <= dead_band:
        sign = 0
    else:
        sign = 1 if lam1 > 0 else -1
    m._yamabe = YamabeReport(sign, lam1, sweeps)
    return m._yamabe


def ckv_kernel(m: Metric, tol: float = 1e-6) -> list:
    """Numerical kernel of the conformal Killing operator.

    Returns a list of one-forms, orthonormal in the volume inner product,
    whose Rayleigh quotients under (1/2)L*L fall below tol relative to the
    top of the computed block.  Flat boxes give the three translations;
    generic metrics give nothing.
    """
    key = float(tol)
    if key in m._ckv:
        return [f.copy() for f in m._ckv[key]]
    n, h = m.grid.n_axis, m.grid.h
    h3 = h ** 3
    kref = (2.0 * np.pi / m.grid.box_length) ** 2
    # small shift: inverse iteration then contracts kernel candidates by
    # shift/lambda_4 per sweep, which is what we are after
    shift = 0.02 * kref
    mean_sg = float(np.mean(m.sqrt_det))
    pre = make_fft_precond(
        n, h, c0=shift * h3 * mean_sg, scale=(7.0 / 12.0) * h3 * mean_sg
    )

    def apply_b(W):
        return _half_lstar_l_plain(m, W)

    def apply_d(W):
        return _m1_apply(m, W)

    # pairs well above the kernel scale only need to be located, not
    # resolved; 5 percent of the reference wavenumber is orders of
    # magnitude above any plausible kernel threshold
    rng = np.random.default_rng(4099)
    lam, X, _ = lowest_pairs(
        apply_b, apply_d, pre, (3,) + m.grid.shape, nev=6, shift=shift,
        rng=rng, tol=1e-8, maxit=100, coarse_above=0.05 * kref,
        coarse_tol=5e-3,
    )
    thresh = tol * max(1.0, float(lam[-1]))
    picked = [X[i].copy() for i in range(len(lam)) if lam[i] <= thresh]

    # polish: the block solve leaves ~1e-8 nonkernel wiggles, which later
    # become the projection floor of every kernel-deflated solve.  Two
    # shifted inverse-iteration steps contract them by (shift/lambda_4)^2.
    def apply_shifted(x):
        return apply_b(x) + shift * apply_d(x)

    polished = []
    for v in picked:
        for _ in range(2):
            v, _, _ = pcg(
                apply_shifted, apply_d(v), pre,
                tol=1e-13, maxit=400, best_effort=True,
            )
        polished.append(v)
    fields = []
    for v in polished:
        for f in fields:
            v = v - float(np.sum(f.components * apply_d(v))) * f.components
        nrm = float(np.sqrt(np.sum(v * apply_d(v))))
        if nrm > 0.0:
            fields.append(OneFormField(m.grid, v / nrm))
    m._ckv[key] = [f.copy() for f in fields]
    return fields


# ---------------------------------------------------------------------------
# conformal changes


def conformal_transform(m: Metric, psi: ScalarField) -> Metric:
    """Metric of the rescaled geometry g_hat = psi^4 g."""
    same_grid(m, psi)
    if psi.values.min() <= 0.0:
        raise NonPositive("conformal factor must be strictly positive")
    return build_metric(m.grid, m.g * psi.values ** 4)


def transform_w(psi: ScalarField, w: ScalarField) -> ScalarField:
    """Source density in the rescaled geometry: w_hat = psi^-6 w."""
    same_grid(psi, w)
    return ScalarField(w.grid, w.values / psi.values ** 6)
