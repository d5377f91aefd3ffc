"""Geometry kernels against the sympy continuum oracles."""

import math

import numpy as np
import pytest

from cforge.errors import GridMismatch
from cforge.fixtures import bumpy_metric
from cforge.grid_geometry import (
    GridSpec,
    OneFormField,
    ScalarField,
    SymTensorField,
    build_metric,
    ckv_kernel,
    conformal_killing,
    dirichlet_energy,
    exterior_derivative,
    flat_metric,
    half_LstarL,
    integrate,
    laplace_beltrami,
    lp_norm,
    oneform_norm2,
    same_grid,
    sym_index,
    tensor_norm2,
    yamabe_sign,
)

import oracles


def _fields_on(grid):
    xs, ys, zs = grid.coords
    return xs, ys, zs


def _eval(expr, grid):
    xs, ys, zs = grid.coords
    return oracles.lambdify_on_grid(expr)(xs, ys, zs)


@pytest.fixture(scope="module")
def oracle_bumpy():
    return oracles.MetricOracle(oracles.bumpy_g_exprs(0.05))


@pytest.fixture(scope="module")
def oracle_flat():
    return oracles.MetricOracle()


def test_grid_spec_basics():
    g = GridSpec(8, 2.0)
    assert g.h == 0.25
    assert g.shape == (8, 8, 8)
    xs, ys, zs = g.coords
    assert xs.shape == (8, 8, 8)
    assert float(xs[0, 0, 0]) == 0.0
    assert abs(float(xs[-1, 0, 0]) - (2.0 - 0.25)) < 1e-15


def test_sym_index_covers_upper_triangle():
    seen = set()
    for i in range(3):
        for j in range(3):
            k = sym_index(i, j)
            assert k == sym_index(j, i)
            seen.add(k)
    assert seen == set(range(6))


def test_same_grid_rejects_mixed():
    a = ScalarField.constant(GridSpec(8, 1.0), 1.0)
    b = ScalarField.constant(GridSpec(12, 1.0), 1.0)
    with pytest.raises(GridMismatch):
        same_grid(a, b)


def test_flat_metric_invariants(flat16):
    assert np.all(flat16.sqrt_det == 1.0)
    assert np.all(flat16.scalar_curvature == 0.0)


def test_bumpy_metric_matches_formulas(grid16, bumpy16, oracle_bumpy):
    for a in range(3):
        want = _eval(oracle_bumpy.g[a, a], grid16)
        got = bumpy16.g[sym_index(a, a)]
        assert np.max(np.abs(got - want)) < 1e-12
    want_sq = _eval(oracle_bumpy.sqrt_det, grid16)
    assert np.max(np.abs(bumpy16.sqrt_det - want_sq)) < 1e-12


def _order(err_coarse, err_fine):
    return math.log2(err_coarse / err_fine)


def test_scalar_curvature_second_order(oracle_bumpy):
    want_expr = oracle_bumpy.scalar_curvature()
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        m = bumpy_metric(grid)
        want = _eval(want_expr, grid)
        errs.append(float(np.max(np.abs(m.scalar_curvature - want))))
    assert 1.7 <= _order(*errs) <= 2.4


def test_laplace_beltrami_second_order(oracle_bumpy):
    # the package operator is the nonnegative Laplacian, minus the
    # geometer's divergence form
    want_expr = -oracle_bumpy.laplace_beltrami(oracles.U_EXPR)
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        m = bumpy_metric(grid)
        u = ScalarField(grid, _eval(oracles.U_EXPR, grid))
        got = laplace_beltrami(m, u).values
        errs.append(float(np.max(np.abs(got - _eval(want_expr, grid)))))
    assert 1.7 <= _order(*errs) <= 2.4


def test_laplace_beltrami_flat_exact_rate(oracle_flat):
    # flat metric: the centered stencil's error has a clean h^2 constant
    want_expr = -oracle_flat.laplace_beltrami(oracles.U_EXPR)
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        m = flat_metric(grid)
        u = ScalarField(grid, _eval(oracles.U_EXPR, grid))
        got = laplace_beltrami(m, u).values
        errs.append(float(np.max(np.abs(got - _eval(want_expr, grid)))))
    assert 1.8 <= _order(*errs) <= 2.2


def test_laplacian_annihilates_constants(bumpy16, grid16):
    c = ScalarField.constant(grid16, 3.7)
    assert np.max(np.abs(laplace_beltrami(bumpy16, c).values)) < 1e-12


def test_laplacian_volume_integral_vanishes(bumpy16, grid16, rng):
    from conftest import smooth_positive

    f = smooth_positive(grid16, rng)
    total = integrate(bumpy16, laplace_beltrami(bumpy16, f))
    assert abs(total) < 1e-10


def test_conformal_killing_second_order(oracle_bumpy):
    lw_expr = oracle_bumpy.conformal_killing(oracles.W_EXPRS)
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        m = bumpy_metric(grid)
        W = OneFormField(
            grid, np.stack([_eval(e, grid) for e in oracles.W_EXPRS]))
        got = conformal_killing(m, W)
        err = 0.0
        for i in range(3):
            for j in range(i, 3):
                want = _eval(lw_expr[i, j], grid)
                err = max(err, float(np.max(np.abs(
                    got.components[sym_index(i, j)] - want))))
        errs.append(err)
    assert 1.7 <= _order(*errs) <= 2.4


def test_conformal_killing_is_traceless(bumpy16, grid16):
    W = OneFormField(grid16, np.stack([
        _eval(e, grid16) for e in oracles.W_EXPRS]))
    lw = conformal_killing(bumpy16, W)
    ginv = bumpy16.g_inv
    tr = sum(ginv[sym_index(a, a)] * lw.components[sym_index(a, a)]
             for a in range(3))
    # off-diagonal inverse entries are zero for the diagonal bumpy metric
    assert np.max(np.abs(tr)) < 1e-12


def test_half_lstar_l_second_order(oracle_bumpy):
    want_exprs = oracle_bumpy.half_lstar_l(oracles.W_EXPRS)
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        m = bumpy_metric(grid)
        W = OneFormField(
            grid, np.stack([_eval(e, grid) for e in oracles.W_EXPRS]))
        got = half_LstarL(m, W)
        err = max(
            float(np.max(np.abs(got.components[a] - _eval(want_exprs[a], grid))))
            for a in range(3))
        errs.append(err)
    assert 1.7 <= _order(*errs) <= 2.4


def test_half_lstar_l_adjoint_identity(bumpy16, grid16, rng):
    # <(1/2)L*L W, V>_vol = (1/2) <LW, LV>_vol, exactly at the discrete level
    comps = rng.standard_normal((3,) + grid16.shape)
    comps2 = rng.standard_normal((3,) + grid16.shape)
    W = OneFormField(grid16, comps)
    V = OneFormField(grid16, comps2)
    bw = half_LstarL(bumpy16, W)
    ginv = bumpy16.g_inv
    pair = sum(ginv[sym_index(a, b)] * bw.components[a] * V.components[b]
               for a in range(3) for b in range(3))
    lhs = integrate(bumpy16, pair)
    lw = conformal_killing(bumpy16, W)
    lv = conformal_killing(bumpy16, V)
    inner = np.zeros(grid16.shape)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                for d in range(3):
                    inner += (ginv[sym_index(a, c)] * ginv[sym_index(b, d)]
                              * lw.components[sym_index(a, b)]
                              * lv.components[sym_index(c, d)])
    rhs = 0.5 * integrate(bumpy16, inner)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_half_lstar_l_positive(bumpy16, grid16, rng):
    comps = rng.standard_normal((3,) + grid16.shape)
    W = OneFormField(grid16, comps)
    bw = half_LstarL(bumpy16, W)
    ginv = bumpy16.g_inv
    pair = sum(ginv[sym_index(a, b)] * bw.components[a] * W.components[b]
               for a in range(3) for b in range(3))
    assert integrate(bumpy16, pair) > 0.0


def test_exterior_derivative_second_order():
    want = [None] * 3
    import sympy as sp

    for a, v in enumerate((oracles.X, oracles.Y, oracles.Z)):
        want[a] = sp.diff(oracles.U_EXPR, v)
    errs = []
    for n in (8, 16):
        grid = GridSpec(n, 1.0)
        u = ScalarField(grid, _eval(oracles.U_EXPR, grid))
        got = exterior_derivative(u)
        err = max(float(np.max(np.abs(got.components[a] - _eval(want[a], grid))))
                  for a in range(3))
        errs.append(err)
    assert 1.8 <= _order(*errs) <= 2.2


def test_ckv_kernel_flat_dimension(flat16):
    kern = ckv_kernel(flat16)
    assert len(kern) == 3
    for k in kern:
        lw = conformal_killing(flat16, k)
        assert float(np.max(np.abs(lw.components))) < 1e-5


def test_ckv_kernel_flat_orthonormal(flat16, grid16):
    kern = ckv_kernel(flat16)
    for i, ki in enumerate(kern):
        for j, kj in enumerate(kern):
            dot = integrate(flat16, sum(
                ki.components[a] * kj.components[a] for a in range(3)))
            want = 1.0 if i == j else 0.0
            assert abs(dot - want) < 1e-8


def test_ckv_kernel_bumpy_empty(bumpy16):
    assert ckv_kernel(bumpy16) == []


def test_ckv_kernel_kills_checkerboard(flat16, grid16):
    # the guarded first-derivative stencil must not admit the Nyquist
    # checkerboard as a spurious Killing field
    i, j, k = np.indices(grid16.shape)
    checker = ((-1.0) ** (i + j + k)).astype(float)
    W = OneFormField(grid16, np.stack([checker, np.zeros_like(checker),
                                       np.zeros_like(checker)]))
    lw = conformal_killing(flat16, W)
    assert float(np.max(np.abs(lw.components))) > 1.0


def test_yamabe_sign_flat_is_zero(flat16):
    rep = yamabe_sign(flat16)
    assert rep.sign == 0
    assert abs(rep.lambda1) < 1e-6


def test_yamabe_lambda1_matches_dense_oracle(grid8):
    m = bumpy_metric(grid8)
    rep = yamabe_sign(m)
    g_diag = [m.g[sym_index(a, a)] for a in range(3)]
    want = oracles.dense_lowest_eigenvalue(
        g_diag, m.scalar_curvature, grid8.h, nev=1)[0]
    assert abs(rep.lambda1 - want) < 1e-7 * max(1.0, abs(want))


def test_yamabe_shifted_sign_positive(grid8):
    m = bumpy_metric(grid8, curv_shift=1.0)
    rep = yamabe_sign(m)
    assert rep.sign == 1
    assert rep.lambda1 > 0.5


def test_yamabe_cached_on_metric(bumpy16):
    assert yamabe_sign(bumpy16) is yamabe_sign(bumpy16)


def test_integrate_flat_exact(grid16, flat16):
    xs, _, _ = grid16.coords
    f = ScalarField(grid16, 1.3 + np.sin(2 * np.pi * xs) ** 2)
    # periodic trapezoid integrates trig polynomials below the Nyquist
    # band exactly
    assert abs(integrate(flat16, f) - (1.3 + 0.5)) < 1e-13


def test_integrate_bumpy_resolution_stable():
    vals = []
    for n in (16, 32):
        grid = GridSpec(n, 1.0)
        m = bumpy_metric(grid)
        u = ScalarField(grid, _eval(oracles.U_EXPR, grid))
        vals.append(integrate(m, u))
    # spectral accuracy of the periodic trapezoid rule on smooth data
    assert abs(vals[0] - vals[1]) < 1e-12


def test_lp_norm_constant(flat16, grid16):
    f = ScalarField.constant(grid16, 2.0)
    assert abs(lp_norm(flat16, f, 4.0) - 2.0) < 1e-14


def test_tensor_norm2_matches_formula(bumpy16, grid16, oracle_bumpy):
    s6 = np.zeros((6,) + grid16.shape)
    xs, _, zs = grid16.coords
    s6[sym_index(0, 0)] = np.cos(2 * np.pi * zs)
    s6[sym_index(1, 1)] = -np.cos(2 * np.pi * zs)
    s6[sym_index(0, 1)] = 0.3
    t = SymTensorField(grid16, s6)
    got = tensor_norm2(bumpy16, t).values
    ginv = bumpy16.g_inv
    want = np.zeros(grid16.shape)
    comp = {(0, 0): s6[sym_index(0, 0)], (1, 1): s6[sym_index(1, 1)],
            (0, 1): s6[sym_index(0, 1)], (1, 0): s6[sym_index(0, 1)]}
    for (a, b), v in comp.items():
        for (c, d), w in comp.items():
            want += ginv[sym_index(a, c)] * ginv[sym_index(b, d)] * v * w
    assert np.max(np.abs(got - want)) < 1e-12


def test_oneform_norm2_flat(flat16, grid16):
    w = OneFormField(grid16, np.stack([
        np.full(grid16.shape, 3.0), np.zeros(grid16.shape),
        np.full(grid16.shape, 4.0)]))
    got = oneform_norm2(flat16, w).values
    assert np.max(np.abs(got - 25.0)) < 1e-12


def test_dirichlet_energy_nonnegative(bumpy16, grid16, rng):
    from conftest import smooth_positive

    f = smooth_positive(grid16, rng)
    assert dirichlet_energy(bumpy16, f) > 0.0
    c = ScalarField.constant(grid16, 5.0)
    assert abs(dirichlet_energy(bumpy16, c)) < 1e-12


def test_build_metric_curvature_override(grid8):
    m0 = bumpy_metric(grid8)
    m1 = bumpy_metric(grid8, curv_shift=2.5)
    assert np.max(np.abs(
        (m1.scalar_curvature - m0.scalar_curvature) - 2.5)) < 1e-12


def test_build_metric_rejects_nonspd(grid8):
    from cforge.errors import NonPositiveDefinite

    g6 = np.zeros((6,) + grid8.shape)
    g6[sym_index(0, 0)] = -1.0
    g6[sym_index(1, 1)] = 1.0
    g6[sym_index(2, 2)] = 1.0
    with pytest.raises(NonPositiveDefinite):
        build_metric(grid8, g6)
