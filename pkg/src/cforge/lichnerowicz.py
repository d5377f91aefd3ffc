"""The scalar constraint: 8 Delta u + R u + (2/3) tau^2 u^5 = w^2 / u^7.

w is the unsquared source amplitude; it enters the equation squared.  The
solve strategy is damped Newton with a positivity-preserving line search,
falling back to monotone iteration from a constant supersolution when one
exists.  Existence cases follow the sign of the first eigenvalue of
8 Delta + R together with the triviality pattern of w and tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._solvers import l2, make_fft_precond, pcg
from .config import SolverOptions
from .errors import (
    BracketUnavailable,
    CaseUnsolvable,
    KrylovStagnation,
    NoConvergence,
    NonPositive,
)
from .grid_geometry import (
    Metric,
    ScalarField,
    _sg_lap,
    integrate,
    lp_norm,
    same_grid,
    sup_norm,
    sym_index,
    yamabe_sign,
)

TRIVIAL_TOL = 1e-12


@dataclass
class LichnerowiczProblem:
    metric: Metric
    tau: ScalarField
    w: ScalarField  # source amplitude, w >= 0; the equation uses w^2

    def __post_init__(self):
        same_grid(self.metric, self.tau, self.w)
        if self.w.values.min() < 0.0:
            raise NonPositive("w must be nonnegative")
        if not np.all(np.isfinite(self.tau.values)):
            raise ValueError("tau must be finite")


@dataclass
class ExistenceCase:
    yamabe_sign: int
    w_nontrivial: bool
    tau_nontrivial: bool
    case_id: object  # 1..4 or "no-solution"


@dataclass
class LichSolveReport:
    u: ScalarField
    residual_sup: float
    iterations: int
    method: str  # newton | monotone | hybrid


def _residual_arr(p: LichnerowiczProblem, u: np.ndarray) -> np.ndarray:
    m = p.metric
    lap = _sg_lap(m, u) / m.sqrt_det
    t2 = p.tau.values ** 2
    w2 = p.w.values ** 2
    return (
        8.0 * lap
        + m.scalar_curvature * u
        + (2.0 / 3.0) * t2 * u ** 5
        - w2 * u ** -7
    )


def residual(p: LichnerowiczProblem, u: ScalarField) -> ScalarField:
    """Pointwise 8 Delta u + R u + (2/3) tau^2 u^5 - w^2 u^-7."""
    same_grid(p.metric, u)
    if u.values.min() <= 0.0:
        raise NonPositive("u must be strictly positive")
    return ScalarField(u.grid, _residual_arr(p, u.values))


def _scale(p: LichnerowiczProblem, u: np.ndarray) -> float:
    """Size of the algebraic terms; the solve tolerance is relative to
    this, so tiny-w problems are not held to an absolute yardstick."""
    m = p.metric
    s = max(
        float(np.max(np.abs(m.scalar_curvature * u))),
        float(np.max((2.0 / 3.0) * p.tau.values ** 2 * u ** 5)),
        float(np.max(p.w.values ** 2 * u ** -7)),
    )
    return s if s > 0.0 else 1.0


def classify(p: LichnerowiczProblem) -> ExistenceCase:
    """Existence case from the eigenvalue sign and triviality of w, tau.

    The zero-set fraction of tau standing in for 'Z(tau) has measure
    zero' uses a 50 percent node cutoff.
    """
    ys = yamabe_sign(p.metric).sign
    wnt = sup_norm(p.w) > TRIVIAL_TOL
    tnt = sup_norm(p.tau) > TRIVIAL_TOL
    if ys > 0 and wnt:
        case = 1
    elif ys == 0 and wnt and tnt:
        case = 2
    elif ys < 0:
        zero_frac = float(np.mean(np.abs(p.tau.values) <= TRIVIAL_TOL))
        case = 3 if zero_frac < 0.5 else "no-solution"
    elif ys == 0 and not wnt and not tnt:
        case = 4
    else:
        case = "no-solution"
    return ExistenceCase(ys, wnt, tnt, case)


def constant_bracket(p: LichnerowiczProblem):
    """Constant sub/supersolution pair (u_minus, u_plus).

    Requires R >= 0 and w, tau bounded away from zero.  For R == 0 the
    constants solve the algebraic envelope exactly; with R >= 0 the upper
    constant still dominates and the lower one is halved until its
    subsolution inequality holds pointwise (scaling a subsolution by
    t in (0,1] keeps it one).
    """
    R = p.metric.scalar_curvature
    if float(R.min()) < -TRIVIAL_TOL:
        raise BracketUnavailable("needs R >= 0")
    w = p.w.values
    t2 = p.tau.values ** 2
    wmin = float(w.min())
    t2min = float(t2.min())
    if wmin <= TRIVIAL_TOL or t2min <= TRIVIAL_TOL:
        raise BracketUnavailable("w or tau vanishes somewhere")
    w2max = float((w ** 2).max())
    w2min = wmin ** 2
    t2max = float(t2.max())
    u_plus = (3.0 * w2max / (2.0 * t2min)) ** (1.0 / 12.0)
    u_minus = (3.0 * w2min / (2.0 * t2max)) ** (1.0 / 12.0)
    if float(R.max()) > TRIVIAL_TOL:
        # constants: the subsolution inequality is purely algebraic
        floor = 1e-8 * u_minus
        while np.any(
            R * u_minus + (2.0 / 3.0) * t2 * u_minus ** 5
            > w ** 2 * u_minus ** -7
        ):
            u_minus *= 0.5
            if u_minus < floor:
                raise BracketUnavailable(
                    "no constant subsolution under positive curvature"
                )
    return u_minus, u_plus


def _linear_precond(m: Metric, v_mean: float):
    trg = (
        m.g_inv[sym_index(0, 0)]
        + m.g_inv[sym_index(1, 1)]
        + m.g_inv[sym_index(2, 2)]
    )
    c0 = max(v_mean, 1e-12)
    return make_fft_precond(
        m.grid.n_axis, m.grid.h,
        c0=c0, scale=8.0 * float(np.mean(m.sqrt_det * trg)) / 3.0,
    )


def _jacobi_precond(m: Metric, V, pv):
    """Pointwise inverse of the Jacobian diagonal.

    The spectral preconditioner assumes a roughly constant zeroth-order
    coefficient; once V spans decades (blow-up-scale w) it stalls PCG,
    while the mass term dominates the stencil and the plain diagonal is
    nearly exact.
    """
    trg = (
        m.g_inv[sym_index(0, 0)]
        + m.g_inv[sym_index(1, 1)]
        + m.g_inv[sym_index(2, 2)]
    )
    lap_diag = 2.0 * m.sqrt_det * trg / m.grid.h ** 2
    d = pv ** 2 * (8.0 * lap_diag + m.sqrt_det * V)
    d = np.maximum(d, 1e-12 * float(np.max(np.abs(d))) + 1e-300)
    return lambda x: x / d


def _newton(p, u, cfg, pv=None):
    """Damped Newton; returns (u, residual_sup, iters, converged).

    With pv given, iterates in the conjugated variable v where the
    physical field is pv * v and the residual is pv^-5 F(pv v); the
    conjugation is algebraic, so it commutes with the discretization
    exactly.  pv of ones reproduces the plain iteration bit for bit.
    """
    m = p.metric
    sg = m.sqrt_det
    t2 = p.tau.values ** 2
    w2 = p.w.values ** 2
    if pv is None:
        pv = np.ones(m.grid.shape)
    pv_m5 = pv ** -5
    pv6_sg = pv ** 6 * sg
    F = pv_m5 * _residual_arr(p, pv * u)
    fnorm = l2(np.sqrt(sg) * F)
    for it in range(cfg.max_newton):
        rsup = float(np.max(np.abs(F)))
        uv = pv * u
        if rsup <= cfg.tol * _scale(p, uv) * float(np.max(pv_m5)):
            return u, rsup, it, True
        V = (
            m.scalar_curvature
            + (10.0 / 3.0) * t2 * uv ** 4
            + 7.0 * w2 * uv ** -8
        )

        def apply_j(x):
            return pv * (8.0 * _sg_lap(m, pv * x) + sg * V * pv * x)

        vw = sg * V * pv ** 2
        med = float(np.median(vw))
        wide = med <= 0.0 or float(np.max(vw)) > 100.0 * med
        pres = [_jacobi_precond(m, V, pv), _linear_precond(m, float(np.mean(vw)))]
        if not wide:
            pres.reverse()
        delta = None
        for pre in pres:
            try:
                delta, _, _ = pcg(
                    apply_j, -pv6_sg * F, pre, tol=cfg.pcg_tol,
                    maxit=cfg.pcg_maxit,
                )
                break
            except KrylovStagnation:
                continue
        if delta is None:
            return u, rsup, it, False
        s = 1.0
        while s > 1e-7:
            cand = u + s * delta
            if cand.min() > 0.0:
                Fc = pv_m5 * _residual_arr(p, pv * cand)
                fc = l2(np.sqrt(sg) * Fc)
                if fc <= (1.0 - 1e-4 * s) * fnorm:
                    u, F, fnorm = cand, Fc, fc
                    break
            s *= 0.5
        else:
            return u, rsup, it, False
    rsup = float(np.max(np.abs(F)))
    ok = rsup <= cfg.tol * _scale(p, pv * u) * float(np.max(pv_m5))
    return u, rsup, cfg.max_newton, ok


def _monotone(p, cfg, u_minus, u_plus):
    """Descending iteration from the constant supersolution.

    u_{n+1} solves (8 Delta + M) u_{n+1} = M u_n - G(u_n) with M beating
    the Lipschitz bound of G on the bracket, which keeps the sequence
    decreasing and trapped above u_minus.
    """
    m = p.metric
    sg = m.sqrt_det
    t2 = p.tau.values ** 2
    w2 = p.w.values ** 2
    R = m.scalar_curvature
    M = (
        max(0.0, float(R.max()))
        + (10.0 / 3.0) * float(t2.max()) * u_plus ** 4
        + 7.0 * float(w2.max()) * u_minus ** -8
        + 1.0
    )
    pre = _linear_precond(m, M * float(np.mean(sg)))

    def apply_a(x):
        return 8.0 * _sg_lap(m, x) + sg * M * x

    u = np.full(m.grid.shape, u_plus)
    best = np.inf
    for it in range(cfg.max_monotone):
        F = _residual_arr(p, u)
        rsup = float(np.max(np.abs(F)))
        best = min(best, rsup)
        if rsup <= cfg.tol * _scale(p, u):
            return u, rsup, it, True
        rhs = sg * (M * u - (R * u + (2.0 / 3.0) * t2 * u ** 5
                            - w2 * u ** -7))
        u, _, _ = pcg(apply_a, rhs, pre, tol=cfg.pcg_tol,
                      maxit=cfg.pcg_maxit)
        u = np.maximum(u, 0.5 * u_minus)
    F = _residual_arr(p, u)
    rsup = float(np.max(np.abs(F)))
    return u, rsup, cfg.max_monotone, rsup <= cfg.tol * _scale(p, u)


def solve(p: LichnerowiczProblem, cfg: SolverOptions = None,
          u0: ScalarField = None) -> LichSolveReport:
    """Solve the scalar constraint.

    Initial guess: caller-provided, else the geometric bracket midpoint,
    else max(1, sup(w)^(1/6)).  Case 4 returns the constant 1 by
    convention since solutions are only determined up to constant scale.
    """
    if cfg is None:
        cfg = SolverOptions()
    case = classify(p)
    if case.case_id == "no-solution":
        raise CaseUnsolvable(
            f"no positive solution: eigenvalue sign {case.yamabe_sign}, "
            f"w nontrivial {case.w_nontrivial}, "
            f"tau nontrivial {case.tau_nontrivial}"
        )
    grid = p.metric.grid
    if case.case_id == 4:
        u = np.ones(grid.shape)
        rsup = float(np.max(np.abs(_residual_arr(p, u))))
        return LichSolveReport(ScalarField(grid, u), rsup, 0, "newton")

    bracket = None
    try:
        bracket = constant_bracket(p)
    except BracketUnavailable:
        pass

    if u0 is not None:
        same_grid(p.metric, u0)
        if u0.values.min() <= 0.0:
            raise NonPositive("initial guess must be positive")
        u = u0.values.copy()
    else:
        u = _default_guess(p, bracket)

    if cfg.method == "monotone":
        if bracket is None:
            raise BracketUnavailable(
                "monotone method requires the constant bracket"
            )
        u, rsup, its, ok = _monotone(p, cfg, *bracket)
        if not ok:
            raise NoConvergence(
                f"monotone iteration stalled at residual {rsup:.3e}",
                best_residual=rsup,
            )
        return LichSolveReport(ScalarField(grid, u), rsup, its, "monotone")

    u, rsup, its, ok = _newton(p, u, cfg)
    if ok:
        return LichSolveReport(ScalarField(grid, u), rsup, its, "newton")
    # reseed from the pointwise algebraic balance before giving up
    u2, rsup2, its2, ok = _newton(p, _balance_guess(p), cfg)
    if ok:
        return LichSolveReport(ScalarField(grid, u2), rsup2, its + its2,
                               "newton")
    rsup = min(rsup, rsup2)
    if cfg.method == "auto" and bracket is not None:
        u3, rsup3, its3, ok = _monotone(p, cfg, *bracket)
        if ok:
            return LichSolveReport(
                ScalarField(grid, u3), rsup3, its + its2 + its3, "hybrid"
            )
    raise NoConvergence(
        f"solver stalled at residual {rsup:.3e}", best_residual=rsup
    )


def _default_guess(p: LichnerowiczProblem, bracket) -> np.ndarray:
    if bracket is not None:
        mid = float(np.sqrt(bracket[0] * bracket[1]))
        return np.full(p.metric.grid.shape, mid)
    return np.full(
        p.metric.grid.shape, max(1.0, sup_norm(p.w) ** (1.0 / 6.0))
    )


def _balance_guess(p: LichnerowiczProblem) -> np.ndarray:
    """Node-by-node root of R u + (2/3) tau^2 u^5 - w^2 u^-7.

    Sixty bisections in log u over [1e-6, 1e6], then two smoothing
    passes in log space.  Where the coefficients span many decades a
    constant guess puts Newton in the wrong basin at most nodes; the
    algebraic balance is already correct wherever the data vary slowly
    on the grid scale, leaving the Laplacian as the correction.
    """
    R = p.metric.scalar_curvature
    t2 = p.tau.values ** 2
    w2 = p.w.values ** 2
    lo = np.full(p.metric.grid.shape, math.log(1e-6))
    hi = np.full(p.metric.grid.shape, math.log(1e6))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        u = np.exp(mid)
        f = R * u + (2.0 / 3.0) * t2 * u ** 5 - w2 * u ** -7
        neg = f < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    logu = 0.5 * (lo + hi)
    for _ in range(2):
        acc = logu.copy()
        for ax in range(3):
            acc = acc + np.roll(logu, 1, axis=ax) + np.roll(logu, -1, axis=ax)
        logu = acc / 7.0
    return np.exp(logu)


def solve_transformed_pair(p: LichnerowiczProblem, psi: ScalarField,
                           cfg: SolverOptions = None):
    """Solve the problem and its conformally transformed version.

    The transformed solve runs its own Newton iteration, from its own
    initial guess, on the hat residual psi^-5 F(psi u_hat).  Its
    equivalence to the transformed equation is an algebraic identity, so
    the covariance relation u_hat = u / psi survives discretization at
    solver precision instead of O(h^2).  Returns (u, u_hat).
    """
    if cfg is None:
        cfg = SolverOptions()
    same_grid(p.metric, psi)
    if psi.values.min() <= 0.0:
        raise NonPositive("psi must be strictly positive")
    rep = solve(p, cfg)

    bracket = None
    try:
        bracket = constant_bracket(p)
    except BracketUnavailable:
        pass
    pv = psi.values
    v0 = _default_guess(p, bracket) / pv
    v, rsup, _, ok = _newton(p, v0, cfg, pv=pv)
    if not ok:
        raise NoConvergence(
            f"transformed solve stalled at residual {rsup:.3e}",
            best_residual=rsup,
        )
    return rep.u, ScalarField(p.metric.grid, v)


@dataclass
class SweepRow:
    k: float
    sup_u: float
    sup_ratio: float  # sup(u)^6 / k
    lp_ratio: dict  # alpha -> norm_{L^{6 alpha}}(u)^6 / k


@dataclass
class ConstantWSweep:
    rows: list
    tau_integrals: dict  # alpha -> integral of |tau|^-alpha, inf if capped


def constant_w_sweep(metric: Metric, tau: ScalarField, k_list, alpha_list,
                     cfg: SolverOptions = None) -> ConstantWSweep:
    """Solve with w == k across k_list and report growth ratios.

    For each alpha the table carries norm_{L^{6 alpha}}(u_k)^6 / k, whose
    boundedness is equivalent to integrability of |tau|^-alpha; the
    integral itself is reported alongside, infinite when tau vanishes on
    nodes.
    """
    if cfg is None:
        cfg = SolverOptions()
    ks = [float(k) for k in k_list]
    if any(k <= 1.0 for k in ks) or any(b > a for a, b in zip(ks[1:], ks)):
        raise ValueError("k_list must be increasing with k > 1")
    alphas = [float(a) for a in alpha_list]
    if any(a < 1.0 / 6.0 for a in alphas):
        raise ValueError("alpha must be at least 1/6")
    rows = []
    u_prev = None
    k_prev = None
    for k in ks:
        p = LichnerowiczProblem(
            metric, tau, ScalarField.constant(metric.grid, k)
        )
        u0 = None
        if u_prev is not None:
            u0 = ScalarField(
                metric.grid, u_prev.values * (k / k_prev) ** (1.0 / 6.0)
            )
        rep = solve(p, cfg, u0=u0)
        u_prev, k_prev = rep.u, k
        sup_u = sup_norm(rep.u)
        lp = {
            a: lp_norm(metric, rep.u, 6.0 * a) ** 6 / k for a in alphas
        }
        rows.append(SweepRow(k, sup_u, sup_u ** 6 / k, lp))
    integrals = {}
    for a in alphas:
        abs_tau = np.abs(tau.values)
        if np.any(abs_tau < TRIVIAL_TOL):
            integrals[a] = np.inf
        else:
            integrals[a] = integrate(metric, abs_tau ** -a)
    return ConstantWSweep(rows, integrals)
