"""Coupled constraint system: the fixed-point map and its drivers.

The scalar and vector constraints talk to each other through
w = |sigma + LW|: given phi, the vector equation

    -(1/2) L*L W = (2/3) phi^6 xi

produces W, and the scalar equation with the induced w produces a new
conformal factor.  That composition is the map T.  Solutions of the
coupled system are exactly the fixed points of T, so everything in this
module is machinery for locating fixed points (relaxed Picard, two
continuation schemes, three truncated defect maps), for diagnosing the
failure mode when none is found (blow-up rescaling against the limit
equation), and for certifying that a claimed fixed point really solves
both equations.

No driver trusts its own convergence flag: a result counts as solved
only after an independent evaluation of both residuals.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .config import SolverOptions
from .errors import (
    BlowUp,
    ContinuationNotFound,
    InsufficientBlowUp,
    KappaUnbounded,
    NoConvergence,
    NonPositive,
    NotASolution,
    PreconditionFailed,
    TauNotPositive,
    ValidationError,
)
from .grid_geometry import (
    Metric,
    OneFormField,
    ScalarField,
    SymTensorField,
    _m1_apply,
    _sg_lap,
    ckv_kernel,
    conformal_killing,
    dirichlet_energy,
    exterior_derivative,
    half_LstarL,
    integrate,
    lp_norm,
    oneform_norm2,
    same_grid,
    sup_norm,
    tensor_norm2,
    yamabe_sign,
)
from .lichnerowicz import (
    TRIVIAL_TOL,
    LichnerowiczProblem,
    _residual_arr,
    _scale,
    solve as lichnerowicz_solve,
)
from .vector_solver import VectorProblem, assemble_rhs, solve_vector


# ---------------------------------------------------------------------------
# constraint data


@dataclass
class AssumptionFlags:
    """Hypothesis bookkeeping evaluated once per data set."""

    ckv_kernel_dim: int
    yamabe_sign: int
    sigma_nontrivial: bool
    tau_zero_fraction: float


@dataclass
class ConstraintData:
    """One complete set of given data (g, tau, sigma, xi).

    xi plays the role of d(tau) in the vector source; it is a free slot
    so the modified system (xi = eps d tau, or anything else) shares all
    machinery with the standard one.
    """

    metric: Metric
    tau: ScalarField
    sigma: SymTensorField
    xi: OneFormField
    assumption_flags: AssumptionFlags
    yamabe_lambda1: float
    kernel: list
    warnings: list = field(default_factory=list)
    xi_trivial: bool = False


def prepare_constraint_data(
    metric: Metric,
    tau: ScalarField,
    sigma: SymTensorField,
    xi: OneFormField = None,
) -> ConstraintData:
    """Assemble and vet a data set.

    Computes the assumption flags (kernel dimension, curvature eigenvalue
    sign, sigma triviality, tau zero fraction) and rejects data the
    solvers cannot handle: sigma must not vanish identically when the
    eigenvalue sign is nonnegative.
    """
    same_grid(metric, tau, sigma)
    if xi is None:
        xi = exterior_derivative(tau)
    else:
        same_grid(metric, xi)

    yrep = yamabe_sign(metric)
    sigma_sup = math.sqrt(max(float(np.max(tensor_norm2(metric, sigma).values)), 0.0))
    sigma_nontrivial = sigma_sup > TRIVIAL_TOL
    tau_zero_fraction = float(np.mean(np.abs(tau.values) <= TRIVIAL_TOL))
    kernel = ckv_kernel(metric)

    if yrep.sign >= 0 and not sigma_nontrivial:
        raise ValidationError(
            "sigma must be nontrivial when the curvature eigenvalue sign "
            "is nonnegative",
            field="sigma",
        )

    flags = AssumptionFlags(
        ckv_kernel_dim=len(kernel),
        yamabe_sign=yrep.sign,
        sigma_nontrivial=sigma_nontrivial,
        tau_zero_fraction=tau_zero_fraction,
    )
    warnings = []
    if kernel:
        warnings.append(
            f"metric carries a {len(kernel)}-dimensional conformal Killing "
            "space; vector sources are projected onto its complement"
        )
    xi_trivial = math.sqrt(max(float(np.max(oneform_norm2(metric, xi).values)), 0.0)) <= TRIVIAL_TOL
    return ConstraintData(
        metric=metric,
        tau=tau,
        sigma=sigma,
        xi=xi,
        assumption_flags=flags,
        yamabe_lambda1=yrep.lambda1,
        kernel=kernel,
        warnings=warnings,
        xi_trivial=xi_trivial,
    )


# ---------------------------------------------------------------------------
# the map T


def _zero_oneform(grid) -> OneFormField:
    return OneFormField(grid, np.zeros((3,) + grid.shape))


def _w_from_vector(data: ConstraintData, w_field: OneFormField) -> ScalarField:
    """w = |sigma + LW| pointwise."""
    m = data.metric
    lw = conformal_killing(m, w_field)
    total = SymTensorField(m.grid, data.sigma.components + lw.components)
    return ScalarField(m.grid, np.sqrt(np.maximum(tensor_norm2(m, total).values, 0.0)))


def _apply_t(data: ConstraintData, phi: ScalarField, cfg: SolverOptions,
             u0: ScalarField = None):
    """One application of T plus the per-application diagnostics.

    Returns (psi, w_field, info) with info holding the relative residual
    of each half-solve and the L2 size of LW.
    """
    m = data.metric
    grid = m.grid
    if float(np.min(phi.values)) < 0.0:
        raise NonPositive("phi must be nonnegative")

    if data.xi_trivial:
        w_field = _zero_oneform(grid)
        vec_rel = 0.0
        lw_l2 = 0.0
        w = ScalarField(grid, np.sqrt(np.maximum(
            tensor_norm2(m, data.sigma).values, 0.0)))
    else:
        rhs = assemble_rhs(m, phi, data.xi)
        vrep = solve_vector(VectorProblem(m, rhs, kernel=data.kernel), cfg)
        w_field = vrep.w_field
        vec_rel = vrep.rel_residual
        lw = conformal_killing(m, w_field)
        lw_l2 = math.sqrt(max(integrate(m, tensor_norm2(m, lw)), 0.0))
        total = SymTensorField(grid, data.sigma.components + lw.components)
        w = ScalarField(grid, np.sqrt(np.maximum(
            tensor_norm2(m, total).values, 0.0)))

    prob = LichnerowiczProblem(m, data.tau, w)
    rep = lichnerowicz_solve(prob, cfg, u0=u0)
    lich_rel = rep.residual_sup / _scale(prob, rep.u.values)
    info = {
        "lich_residual": lich_rel,
        "vector_residual": vec_rel,
        "lw_l2": lw_l2,
        "lich_iterations": rep.iterations,
    }
    return rep.u, w_field, info


def map_T(data: ConstraintData, phi: ScalarField, cfg: SolverOptions = None):
    """T(phi): vector solve with source (2/3) phi^6 xi, then the scalar
    solve with w = |sigma + LW|.  Returns (psi, w_field), psi > 0."""
    if cfg is None:
        cfg = SolverOptions()
    psi, w_field, _ = _apply_t(data, phi, cfg)
    return psi, w_field


# ---------------------------------------------------------------------------
# certification


@dataclass
class CertificationReport:
    lich_residual: float
    vector_residual: float
    lich_tol: float
    vector_tol: float
    certified: bool


def certify(data: ConstraintData, phi: ScalarField, w_field: OneFormField,
            lich_tol: float = 1e-8, vector_tol: float = 1e-8) -> CertificationReport:
    """Independent residual check of both equations for the pair (phi, W).

    The scalar residual is sup-norm relative to the problem scale; the
    vector residual is volume-L2 relative to the (projected) source.  A
    vanishing source makes the vector residual absolute.
    """
    m = data.metric
    grid = m.grid
    if float(np.min(phi.values)) <= 0.0:
        return CertificationReport(math.inf, math.inf, lich_tol, vector_tol, False)

    w = _w_from_vector(data, w_field)
    prob = LichnerowiczProblem(m, data.tau, w)
    lich_rel = float(np.max(np.abs(_residual_arr(prob, phi.values))))
    lich_rel /= _scale(prob, phi.values)

    eta = (2.0 / 3.0) * phi.values[None] ** 6 * data.xi.components
    for k in data.kernel:
        c = float(np.vdot(k.components, _m1_apply(m, eta)))
        eta = eta - c * k.components
    rof = half_LstarL(m, w_field).components + eta
    num = math.sqrt(max(integrate(m, oneform_norm2(m, OneFormField(grid, rof))), 0.0))
    den = math.sqrt(max(integrate(m, oneform_norm2(m, OneFormField(grid, eta))), 0.0))
    vec_rel = num / den if den > 1e-14 else num

    ok = lich_rel <= lich_tol and vec_rel <= vector_tol
    return CertificationReport(lich_rel, vec_rel, lich_tol, vector_tol, ok)


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass
class ContinuationTrace:
    """Per-step records plus the raw fields needed by the limit
    diagnostic.  tail holds (phi, w_field, t) for every converged step."""

    records: list
    outcome: str  # converged_full | blow_up | stagnated
    tail: list = field(default_factory=list)


def _record(t, sup_psi, iters, info):
    return {
        "t": t,
        "sup_psi": sup_psi,
        "picard_iters": iters,
        "lich_residual": info["lich_residual"],
        "vector_residual": info["vector_residual"],
        "lw_l2": info["lw_l2"],
    }


def picard_solve(data: ConstraintData, phi0: ScalarField = None,
                 relax: float = None, tol: float = None,
                 max_iter: int = None, cfg: SolverOptions = None):
    """Relaxed Picard iteration phi <- (1-relax) phi + relax T(phi).

    Success requires the sup-norm update to fall below tol relative to
    the iterate AND the final pair to certify against both equations.
    Constant tau decouples the system, T is then constant in phi and the
    loop finishes in at most two applications.

    Returns (phi, w_field, trace); raises BlowUp past cfg.ceiling and
    NoConvergence at the iteration budget, both carrying the trace.
    """
    if cfg is None:
        cfg = SolverOptions()
    relax = cfg.relax if relax is None else relax
    if not 0.0 < relax <= 1.0:
        raise ValidationError("must lie in (0, 1]", field="relax")
    tol = cfg.picard_tol if tol is None else tol
    max_iter = cfg.picard_max_iter if max_iter is None else max_iter
    grid = data.metric.grid
    phi = ScalarField(grid, np.ones(grid.shape)) if phi0 is None else phi0
    if float(np.min(phi.values)) < 0.0:
        raise NonPositive("phi0 must be nonnegative")
    if data.xi_trivial:
        relax = 1.0  # T constant in phi; damping only slows the loop

    records = []
    trace = ContinuationTrace(records, "stagnated")
    psi_prev = None
    settled = 0
    for n in range(1, max_iter + 1):
        psi, w_field, info = _apply_t(data, phi, cfg, u0=psi_prev)
        psi_prev = psi
        new_vals = (1.0 - relax) * phi.values + relax * psi.values
        diff = float(np.max(np.abs(new_vals - phi.values)))
        sup_new = float(np.max(new_vals))
        records.append(_record(1.0, sup_new, n, info))
        if sup_new > cfg.ceiling:
            trace.outcome = "blow_up"
            raise BlowUp(
                f"iterate sup {sup_new:.3e} exceeded ceiling {cfg.ceiling:.1e}",
                trace=trace,
            )
        scale = float(np.max(phi.values))
        phi = ScalarField(grid, new_vals)
        if diff <= tol * max(scale, 1e-300):
            cert = certify(data, psi, w_field)
            if cert.certified:
                trace.outcome = "converged_full"
                trace.tail.append((psi, w_field, 1.0))
                return psi, w_field, trace
            # settled in sup norm but the residuals disagree; one more
            # pass can still help, a third cannot
            settled += 1
            if settled >= 3:
                raise NoConvergence(
                    "iteration settled without residual certification "
                    f"({cert.lich_residual:.3e} / {cert.vector_residual:.3e})",
                    best_residual=max(cert.lich_residual, cert.vector_residual),
                )
    raise NoConvergence(
        f"picard iteration did not settle in {max_iter} steps",
        best_residual=diff,
    )


# ---------------------------------------------------------------------------
# continuation drivers


def _validate_t_grid(t_grid, require_end_one=True):
    ts = [float(t) for t in t_grid]
    if not ts:
        raise ValidationError("t_grid must be nonempty", field="t_grid")
    if any(t < 0.0 or t > 1.0 for t in ts):
        raise ValidationError("values must lie in [0, 1]", field="t_grid")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValidationError("values must increase", field="t_grid")
    if require_end_one and abs(ts[-1] - 1.0) > 1e-12:
        raise ValidationError("must end at 1", field="t_grid")
    return ts


def schaefer_continuation(data: ConstraintData, t_grid,
                          cfg: SolverOptions = None) -> ContinuationTrace:
    """Solve phi = t T(phi) along an increasing t grid ending at 1.

    Each step runs the relaxed Picard loop warm-started from the previous
    step's solution.  Outcome blow_up is declared when an iterate passes
    cfg.ceiling or the converged sup grows by more than cfg.growth_limit
    between consecutive steps; a step that simply stalls gives outcome
    stagnated.  Records are kept for every attempted t.
    """
    if cfg is None:
        cfg = SolverOptions()
    ts = _validate_t_grid(t_grid)
    grid = data.metric.grid
    records = []
    trace = ContinuationTrace(records, "converged_full")

    phi = ScalarField(grid, np.zeros(grid.shape))
    sup_prev = None
    for t in ts:
        if t == 0.0:
            # phi = 0 solves phi = 0*T(phi) exactly; record it but keep it
            # out of the tail, which feeds the rescaled blow-up diagnostic
            records.append(_record(0.0, 0.0, 0, {
                "lich_residual": 0.0, "vector_residual": 0.0, "lw_l2": 0.0}))
            continue
        # warm start; a zero field is a legal input to T
        psi_prev = None
        info = {"lich_residual": math.inf, "vector_residual": math.inf,
                "lw_l2": math.inf}
        converged = False
        recent = deque(maxlen=5)
        for n in range(1, cfg.picard_max_iter + 1):
            psi, w_field, info = _apply_t(data, phi, cfg, u0=psi_prev)
            psi_prev = psi
            recent.append((psi, w_field))
            new_vals = (1.0 - cfg.relax) * phi.values + cfg.relax * t * psi.values
            diff = float(np.max(np.abs(new_vals - phi.values)))
            sup_new = float(np.max(new_vals))
            if sup_new > cfg.ceiling:
                records.append(_record(t, sup_new, n, info))
                # the escaping iterates are the operational unbounded
                # family; hand them to the rescaling diagnostic
                trace.tail.extend((p, w, t) for p, w in recent)
                trace.outcome = "blow_up"
                return trace
            scale = float(np.max(phi.values))
            phi = ScalarField(grid, new_vals)
            if diff <= cfg.picard_tol * max(scale, 1e-300):
                converged = True
                records.append(_record(t, float(np.max(phi.values)), n, info))
                break
        if not converged:
            records.append(_record(t, float(np.max(phi.values)),
                                   cfg.picard_max_iter, info))
            trace.outcome = "stagnated"
            return trace
        sup_t = float(np.max(phi.values))
        trace.tail.append((phi, w_field, t))
        if sup_prev is not None and sup_prev > 0.0 \
                and sup_t > cfg.growth_limit * sup_prev:
            trace.outcome = "blow_up"
            return trace
        sup_prev = sup_t
    return trace


def modified_continuation_t12(data: ConstraintData, t_grid=None,
                              cfg: SolverOptions = None):
    """Continuation in the data rather than the map: the t-modified
    system is the coupled system for (g, t^6 tau, sigma, t^6 xi), so each
    step is a full Picard solve on rescaled data.  Returns
    (alpha, phi, w_field) for the largest converged t, alpha = t^6, and
    the returned pair solves the system for data (g, alpha tau, sigma).

    Requires a positive curvature eigenvalue sign and nontrivial sigma.
    """
    if cfg is None:
        cfg = SolverOptions()
    if data.assumption_flags.yamabe_sign <= 0:
        raise ValidationError(
            "positive curvature eigenvalue sign required", field="data")
    if not data.assumption_flags.sigma_nontrivial:
        raise ValidationError("sigma must be nontrivial", field="sigma")
    ts = _validate_t_grid(
        t_grid if t_grid is not None else [0.25, 0.5, 0.75, 1.0],
        require_end_one=False,
    )
    if ts[0] <= 0.0:
        raise ValidationError("values must be positive", field="t_grid")

    grid = data.metric.grid
    best = None
    phi_start = None
    for t in ts:
        s = t ** 6
        data_t = replace(
            data,
            tau=ScalarField(grid, s * data.tau.values),
            xi=OneFormField(grid, s * data.xi.components),
        )
        try:
            phi, w_field, _ = picard_solve(data_t, phi0=phi_start, cfg=cfg)
        except (BlowUp, NoConvergence):
            phi_start = None
            continue
        best = (s, phi, w_field)
        phi_start = phi
    if best is None:
        raise ContinuationNotFound(
            "no t in the sweep produced a converged fixed point")
    return best


# ---------------------------------------------------------------------------
# blow-up rescaling against the limit equation


@dataclass
class LimitDiagnostic:
    alpha0: float
    profile_error: float
    limit_residual: float


def limit_diagnostic(data: ConstraintData, tail) -> LimitDiagnostic:
    """Rescale the last trace entry and compare against the limit system.

    With gamma = sup phi, the rescaled pair is phi/gamma, W/gamma^6.  The
    predicted profile is (sqrt(3/2) |LW~| / tau)^(1/6) and the limit
    equation residual is measured in volume-L2 relative to |LW~|.  The
    tail must show at least a 10x growth in sup phi, else the rescaling
    carries no information.
    """
    m = data.metric
    grid = m.grid
    tau = data.tau.values
    if float(np.min(tau)) <= 0.0:
        raise TauNotPositive("limit diagnostic requires tau > 0 pointwise")
    if len(tail) < 2:
        raise ValidationError("need at least two entries", field="tail")

    gamma_first = float(np.max(np.abs(tail[0][0].values)))
    phi, w_field, t = tail[-1]
    gamma = float(np.max(np.abs(phi.values)))
    if gamma <= 0.0:
        raise InsufficientBlowUp("final iterate vanishes")
    growth = math.inf if gamma_first <= 0.0 else gamma / gamma_first
    if growth < 10.0:
        raise InsufficientBlowUp(
            f"sup growth x{growth:.2f} across the tail is below x10")

    alpha0 = float(t) ** 6
    psi_t = phi.values / gamma
    w_t = OneFormField(grid, w_field.components / gamma ** 6)
    lw = conformal_killing(m, w_t)
    lw_abs = np.sqrt(np.maximum(tensor_norm2(m, lw).values, 0.0))
    predicted = (math.sqrt(1.5) * lw_abs / tau) ** (1.0 / 6.0)
    profile_error = float(np.max(np.abs(psi_t - predicted)))

    rof = half_LstarL(m, w_t).components \
        + alpha0 * math.sqrt(2.0 / 3.0) * lw_abs[None] * data.xi.components / tau[None]
    num = math.sqrt(max(integrate(m, oneform_norm2(m, OneFormField(grid, rof))), 0.0))
    den = math.sqrt(max(integrate(m, tensor_norm2(m, lw)), 0.0))
    limit_residual = num / den if den > 0.0 else math.inf
    return LimitDiagnostic(alpha0, profile_error, limit_residual)


# ---------------------------------------------------------------------------
# defect maps


def kappa_bounds(data: ConstraintData):
    """Pointwise floor of R u^8 + (1/3) tau^2 u^12 over u > 0, and the
    truncation constant kappa = max(|kappa1|, integral of |sigma|^2).

    At a node the floor is 0 when R >= 0 and (4/3) R^3 / tau^4 otherwise
    (stationary point u^4 = -2R/tau^2).  Negative curvature meeting a
    zero of tau makes the floor minus infinity.
    """
    m = data.metric
    r = m.scalar_curvature
    tau = data.tau.values
    neg = r < 0.0
    if bool(np.any(neg & (np.abs(tau) < 1e-12))):
        raise KappaUnbounded(
            "negative curvature at a zero of tau: no pointwise floor")
    vals = np.zeros_like(r)
    if bool(np.any(neg)):
        vals[neg] = (4.0 / 3.0) * r[neg] ** 3 / tau[neg] ** 4
    kappa1 = float(np.min(vals))
    sigma_l2sq = integrate(m, tensor_norm2(m, data.sigma))
    kappa = max(abs(kappa1), sigma_l2sq)
    return kappa1, kappa


def default_truncation(data: ConstraintData, cfg: SolverOptions = None) -> float:
    """Truncation height for the defect maps.

    Bootstrap: solve the scalar equation with w = |sigma|, push that
    solution once through the vector solve to estimate sup |LW|, re-solve
    with w = |sigma| + sup|LW|, and take ten times the resulting sup.
    """
    if cfg is None:
        cfg = SolverOptions()
    m = data.metric
    grid = m.grid
    sig_abs = np.sqrt(np.maximum(tensor_norm2(m, data.sigma).values, 0.0))
    rep = lichnerowicz_solve(
        LichnerowiczProblem(m, data.tau, ScalarField(grid, sig_abs)), cfg)
    if data.xi_trivial:
        lw_sup = 0.0
    else:
        rhs = assemble_rhs(m, rep.u, data.xi)
        vrep = solve_vector(VectorProblem(m, rhs, kernel=data.kernel), cfg)
        lw = conformal_killing(m, vrep.w_field)
        lw_sup = math.sqrt(max(float(np.max(tensor_norm2(m, lw).values)), 0.0))
    rep2 = lichnerowicz_solve(
        LichnerowiczProblem(m, data.tau, ScalarField(grid, sig_abs + lw_sup)),
        cfg)
    return 10.0 * float(np.max(rep2.u.values))


@dataclass
class DefectReport:
    phi: ScalarField
    w_field: OneFormField
    outcome: str  # fixed_point | zero_fixed_point | no_convergence
    iterations: int
    branch_log: list
    lich_residual: float
    vector_residual: float
    details: dict


def _defect_loop(data: ConstraintData, branch_fn, phi0: ScalarField,
                 cfg: SolverOptions, details: dict) -> DefectReport:
    """Plain iteration of a truncated map S.

    branch_fn(phi, psi, a_psi_info) -> (s_values, label, extra) decides
    which branch of S fires for the input iterate; label "zero" means the
    defect branch.  Two zero-branch hits end the run: S(0) is never 0
    when sigma is nontrivial, so the second hit proves a cycle.
    """
    grid = data.metric.grid
    phi = phi0
    psi_prev = None
    log = []
    zero_hits = 0
    last = None  # (psi, w_field, info) of the latest T application
    for n in range(1, cfg.picard_max_iter + 1):
        psi, w_field, info = _apply_t(data, phi, cfg, u0=psi_prev)
        psi_prev = psi
        last = (psi, w_field, info)
        s_vals, label, extra = branch_fn(phi, psi, info)
        entry = {"iter": n, "branch": label,
                 "sup_phi": float(np.max(s_vals))}
        entry.update(extra)
        log.append(entry)
        diff = float(np.max(np.abs(s_vals - phi.values)))
        scale = max(float(np.max(phi.values)), 1e-300)
        phi = ScalarField(grid, s_vals)
        if label == "zero":
            zero_hits += 1
            if zero_hits >= 2:
                return DefectReport(
                    phi, w_field, "zero_fixed_point", n, log,
                    info["lich_residual"], info["vector_residual"], details)
            continue
        if diff <= cfg.picard_tol * scale:
            truncated = bool(extra.get("truncated", False))
            details["truncated"] = truncated
            if truncated:
                details["certified"] = False
                return DefectReport(
                    phi, w_field, "fixed_point", n, log,
                    info["lich_residual"], info["vector_residual"], details)
            cert = certify(data, psi, w_field)
            details["certified"] = cert.certified
            return DefectReport(
                psi, w_field, "fixed_point", n, log,
                cert.lich_residual, cert.vector_residual, details)
    details["certified"] = False
    psi, w_field, info = last
    return DefectReport(
        phi, w_field, "no_convergence", cfg.picard_max_iter, log,
        info["lich_residual"], info["vector_residual"], details)


def near_cmc_defect_iterate(data: ConstraintData, a: float = None,
                            cfg: SolverOptions = None) -> DefectReport:
    """Iterate S(phi) = min(T(phi), a) gated by |LW| small in L2.

    The clean branch fires while the L2 norm of LW stays below
    sqrt(kappa); otherwise S returns 0.  A converged nonzero untruncated
    fixed point is certified against both equations.  tau must be
    bounded away from zero so the L3 norm of xi/tau is finite.
    """
    if cfg is None:
        cfg = SolverOptions()
    m = data.metric
    grid = m.grid
    tau = data.tau.values
    if bool(np.any(np.abs(tau) <= TRIVIAL_TOL)):
        raise PreconditionFailed(
            "tau vanishes at a node: the xi/tau smallness gate is infinite")
    xi_abs = np.sqrt(np.maximum(oneform_norm2(m, data.xi).values, 0.0))
    ratio_l3 = lp_norm(m, ScalarField(grid, xi_abs / np.abs(tau)), 3)
    kappa1, kappa = kappa_bounds(data)
    sqrt_kappa = math.sqrt(kappa)
    if a is None:
        a = default_truncation(data, cfg)

    details = {
        "xi_over_tau_l3": ratio_l3,
        "kappa1": kappa1,
        "kappa": kappa,
        "a": a,
    }

    def branch(phi, psi, info):
        lw_l2 = info["lw_l2"]
        if lw_l2 <= sqrt_kappa:
            s = np.minimum(psi.values, a)
            return s, "clean", {"lw_l2": lw_l2, "sqrt_kappa": sqrt_kappa,
                                "truncated": bool(np.any(psi.values > a))}
        return np.zeros(grid.shape), "zero", {"lw_l2": lw_l2,
                                              "sqrt_kappa": sqrt_kappa}

    # 0 is the canonical base point: both branch gates hold trivially
    # there, so the first step is the decoupled solve min(T(0), a)
    phi0 = ScalarField(grid, np.zeros(grid.shape))
    return _defect_loop(data, branch, phi0, cfg, details)


def far_cmc_defect_iterate(data: ConstraintData, a: float = None,
                           cfg: SolverOptions = None) -> DefectReport:
    """Iterate the far-from-constant-tau defect map.

    The clean branch requires (7/16) Y (integral phi^24)^(1/3) to stay
    below 2 integral |sigma|^2, with Y the first eigenvalue of 8 lap + R
    standing in for the conformal infimum.  The report carries both sides
    of that threshold at the final iterate and the sufficiency chain
    value |xi|_{L4}^2 (32/(7Y))^(3/2) |sigma|_{L2}; the chain certifies
    the regime when it is at most 1.  A margin under 2x between the
    threshold sides raises the conservative flag.
    """
    if cfg is None:
        cfg = SolverOptions()
    if data.assumption_flags.yamabe_sign <= 0:
        raise PreconditionFailed(
            "positive curvature eigenvalue sign required")
    if not data.assumption_flags.sigma_nontrivial:
        raise PreconditionFailed("sigma must be nontrivial")
    m = data.metric
    grid = m.grid
    y = data.yamabe_lambda1
    sigma_l2sq = integrate(m, tensor_norm2(m, data.sigma))
    right = 2.0 * sigma_l2sq
    xi_abs = np.sqrt(np.maximum(oneform_norm2(m, data.xi).values, 0.0))
    chain = (
        lp_norm(m, ScalarField(grid, xi_abs), 4) ** 2
        * (32.0 / (7.0 * y)) ** 1.5
        * math.sqrt(sigma_l2sq)
    )
    if a is None:
        a = default_truncation(data, cfg)

    details = {
        "yamabe_lambda1": y,
        "threshold_right": right,
        "chain_value": chain,
        "chain_certifies": chain <= 1.0,
        "a": a,
        "min_scalar_curvature": float(np.min(m.scalar_curvature)),
    }

    def branch(phi, psi, info):
        left = (7.0 / 16.0) * y * integrate(
            m, ScalarField(grid, phi.values ** 24)) ** (1.0 / 3.0)
        extra = {"threshold_left": left, "threshold_right": right}
        if left <= right:
            extra["truncated"] = bool(np.any(psi.values > a))
            return np.minimum(psi.values, a), "clean", extra
        return np.zeros(grid.shape), "zero", extra

    phi0 = ScalarField(grid, np.zeros(grid.shape))
    report = _defect_loop(data, branch, phi0, cfg, details)
    left_final = next(
        (e["threshold_left"] for e in reversed(report.branch_log)
         if "threshold_left" in e), 0.0)
    margin = right / left_final if left_final > 0.0 else math.inf
    report.details["threshold_left"] = left_final
    report.details["conservative"] = margin < 2.0
    return report


# ---------------------------------------------------------------------------
# local supersolutions


@dataclass
class ProbeResult:
    node: tuple
    beta: float
    min_gap: float
    passed: bool


@dataclass
class LocalSupersolutionReport:
    probes: list
    falsified: bool


def local_supersolution_check(data: ConstraintData, psi_candidate: ScalarField,
                              probe_count: int = 8, seed: int = 0,
                              cfg: SolverOptions = None) -> LocalSupersolutionReport:
    """Sampling falsifier for the local supersolution property.

    Each probe builds phi = psi (1 - beta * bump) with a smooth bump that
    vanishes at a random touch node, so phi <= psi with equality there,
    and checks that T(phi) dips below phi somewhere.  All probes passing
    means "not falsified"; it is evidence, not a proof.
    """
    if cfg is None:
        cfg = SolverOptions()
    if float(np.min(psi_candidate.values)) <= 0.0:
        raise NonPositive("psi_candidate must be positive")
    m = data.metric
    grid = m.grid
    n = grid.n_axis
    length = grid.box_length
    x = grid.h * np.arange(n)
    rng = np.random.default_rng(seed)
    slack = 1e-10 * max(1.0, float(np.max(psi_candidate.values)))

    probes = []
    for _ in range(probe_count):
        node = tuple(int(i) for i in rng.integers(0, n, size=3))
        beta = float(rng.uniform(0.1, 0.9))
        hump = np.ones(grid.shape)
        for axis, i0 in enumerate(node):
            prof = 0.5 * (1.0 + np.cos(2.0 * math.pi * (x - x[i0]) / length))
            shape = [1, 1, 1]
            shape[axis] = n
            hump = hump * prof.reshape(shape)
        phi = ScalarField(grid, psi_candidate.values * (1.0 - beta * (1.0 - hump)))
        t_phi, _ = map_T(data, phi, cfg)
        gap = float(np.min(t_phi.values - phi.values))
        probes.append(ProbeResult(node, beta, gap, gap <= slack))
    return LocalSupersolutionReport(probes, not all(p.passed for p in probes))


def local_supersolution_solve(data: ConstraintData, psi: ScalarField,
                              cfg: SolverOptions = None) -> DefectReport:
    """Iterate S(phi) = T(phi) while phi stays at or below psi, else 0.

    Starting at psi itself, a genuine local supersolution traps the
    iteration below psi and the loop settles on a fixed point of T; a
    psi that sits below every solution collapses the run to 0, which the
    report states rather than hides.
    """
    if cfg is None:
        cfg = SolverOptions()
    if float(np.min(psi.values)) <= 0.0:
        raise NonPositive("psi must be positive")
    grid = data.metric.grid
    bound = psi.values
    details = {"psi_sup": float(np.max(bound))}

    def branch(phi, psi_t, info):
        overflow = float(np.max(phi.values - bound))
        extra = {"overflow": overflow}
        if overflow <= 0.0:
            extra["sup_T"] = float(np.max(psi_t.values))
            return psi_t.values, "clean", extra
        return np.zeros(grid.shape), "zero", extra

    return _defect_loop(data, branch, psi, cfg, details)


# ---------------------------------------------------------------------------
# a priori monitors


@dataclass
class AprioriReport:
    lich_residual: float
    vector_residual: float
    lw_l2: float
    lw_bound: float
    lw_within_bound: bool
    sup_phi: float
    phi4_l2: float
    phi4_l6: float
    grad_phi4_l2: float
    ibp_gap: float


def apriori_monitor(data: ConstraintData, phi: ScalarField,
                    w_field: OneFormField, l: float,
                    tol: float = 1e-8) -> AprioriReport:
    """Monitors along the a priori estimate for a claimed solution.

    Refuses input whose residuals exceed tol.  Reports the L2 size of LW
    against the declared bound l, the sup and fourth-power norms of phi,
    and the relative gap in the identity
    8 int phi^7 lap(phi) dv = (7/2) int |grad phi^4|^2 dv.
    """
    cert = certify(data, phi, w_field, lich_tol=tol, vector_tol=tol)
    if not cert.certified:
        raise NotASolution(
            f"residuals {cert.lich_residual:.3e} / {cert.vector_residual:.3e} "
            f"exceed {tol:.1e}")
    m = data.metric
    grid = m.grid
    lw = conformal_killing(m, w_field)
    lw_l2 = math.sqrt(max(integrate(m, tensor_norm2(m, lw)), 0.0))
    p4 = ScalarField(grid, phi.values ** 4)
    lhs = 8.0 * grid.h ** 3 * float(np.vdot(phi.values ** 7, _sg_lap(m, phi.values)))
    rhs = 3.5 * dirichlet_energy(m, p4)
    gap = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    return AprioriReport(
        lich_residual=cert.lich_residual,
        vector_residual=cert.vector_residual,
        lw_l2=lw_l2,
        lw_bound=l,
        lw_within_bound=lw_l2 <= l,
        sup_phi=float(np.max(phi.values)),
        phi4_l2=lp_norm(m, p4, 2),
        phi4_l6=lp_norm(m, p4, 6),
        grad_phi4_l2=math.sqrt(max(dirichlet_energy(m, p4), 0.0)),
        ibp_gap=gap,
    )


def scaling_transform(data: ConstraintData, phi: ScalarField,
                      w_field: OneFormField, c: float):
    """Exact equivalence (g, tau, sigma) -> (g, c^2 tau, sigma / c^4).

    A solution maps to (phi / c, W / c^4); both residual evaluations
    commute with the transform at the discrete level, so certification
    carries over up to roundoff.
    """
    if not c > 0:
        raise ValidationError("must be positive", field="c")
    grid = data.metric.grid
    data_c = replace(
        data,
        tau=ScalarField(grid, c ** 2 * data.tau.values),
        sigma=SymTensorField(grid, data.sigma.components / c ** 4),
        xi=OneFormField(grid, c ** 2 * data.xi.components),
    )
    phi_c = ScalarField(grid, phi.values / c)
    w_c = OneFormField(grid, w_field.components / c ** 4)
    return data_c, phi_c, w_c
