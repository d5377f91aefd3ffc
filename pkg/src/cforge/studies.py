"""Scripted experiment campaigns over the fixture registry.

Each study walks a parameter grid, runs the referenced solver at every
point, and writes an RFC-4180 table plus a run-summary text file.  A row
never aborts the campaign: solver failures land in the row's status
column.  Tables are byte-identical for identical specs because rows are
assembled in grid order regardless of which worker finished first.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import SolverOptions, worker_count
from .coupled import (
    certify,
    far_cmc_defect_iterate,
    limit_diagnostic,
    picard_solve,
    scaling_transform,
    schaefer_continuation,
)
from .errors import BlowUp, NoConvergence, ValidationError
from .fieldio import render_summary, write_csv
from .fixtures import build_fixture, build_sweep_fixture, registry
from .grid_geometry import GridSpec, ScalarField, integrate, lp_norm
from .lichnerowicz import LichnerowiczProblem, _scale, solve as lich_solve

_KINDS = (
    "blowup_sweep",
    "dichotomy",
    "near_cmc_bisect",
    "far_cmc_bisect",
    "scaling_matrix",
    "continuation_atlas",
)

_DEFAULTS = {
    "blowup_sweep": {"k_list": [10.0, 100.0, 1000.0, 10000.0],
                     "alpha_list": [0.5, 2.0]},
    "dichotomy": {"k_list": [10.0, 100.0, 1000.0, 10000.0],
                  "alpha_list": [0.5, 2.0]},
    "near_cmc_bisect": {"eps_lo": 1e-3, "eps_hi": 10.0, "max_evals": 40},
    "far_cmc_bisect": {"s_lo": None, "s_hi": None, "max_evals": 40},
    "scaling_matrix": {"c_list": [1.0, 2.0, 4.0]},
    "continuation_atlas": {"t_grid": [0.0, 0.25, 0.5, 0.75, 1.0]},
}


@dataclass
class StudySpec:
    """One campaign: a kind, a fixture id, the parameter grid, and the
    output stem ( <output>.csv and <output>.summary.txt are written)."""

    study_kind: str
    fixture: str
    output: str
    params: dict = field(default_factory=dict)
    n_axis: int = 32
    box_length: float = 1.0
    threads: int = 0

    def validate(self):
        if self.study_kind not in _KINDS:
            raise ValidationError(
                f"unknown study kind {self.study_kind!r}", field="study_kind")
        if self.fixture not in registry():
            raise ValidationError(
                f"unknown fixture {self.fixture!r}", field="fixture")
        merged = dict(_DEFAULTS[self.study_kind])
        merged.update(self.params)
        for key, value in merged.items():
            if isinstance(value, (list, tuple)) and len(value) == 0:
                raise ValidationError("parameter grid is empty", field=key)
        return merged


@dataclass
class StudyResult:
    table_path: str
    summary_path: str
    summary: dict


def run_study(spec: StudySpec, cfg: SolverOptions = None) -> StudyResult:
    if cfg is None:
        cfg = SolverOptions()
    params = spec.validate()
    grid = GridSpec(spec.n_axis, spec.box_length)
    runner = _RUNNERS[spec.study_kind]
    header, rows, summary = runner(spec, params, grid, cfg)
    table = spec.output + ".csv"
    spath = spec.output + ".summary.txt"
    write_csv(table, header, rows)
    body = {"study_kind": spec.study_kind, "fixture": spec.fixture,
            "grid": {"n_axis": spec.n_axis, "box_length": spec.box_length}}
    body.update(summary)
    with open(spath, "w", encoding="utf-8") as fh:
        fh.write(render_summary(body, title="study"))
    return StudyResult(table, spath, body)


def _map_rows(fn, points, threads):
    """Evaluate fn over points, possibly concurrently, keeping grid order."""
    workers = min(worker_count(threads), max(len(points), 1))
    if workers <= 1 or len(points) <= 1:
        return [fn(p) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, points))


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# constant-w sweeps (blow-up law and the integrability dichotomy)


def _sweep_rows(spec, params, grid, cfg):
    metric, tau = build_sweep_fixture(spec.fixture, grid)
    alphas = [float(a) for a in params["alpha_list"]]

    def one(k):
        k = float(k)
        w = ScalarField.constant(grid, k)
        try:
            rep = lich_solve(LichnerowiczProblem(metric, tau, w), cfg)
        except Exception as exc:  # recorded, never fatal
            return {"k": k, "status": f"error: {type(exc).__name__}"}
        u = rep.u
        rel = rep.residual_sup / _scale(
            LichnerowiczProblem(metric, tau, w), u.values)
        row = {
            "k": k,
            "sup_u": float(np.max(u.values)),
            "sup_ratio": float(np.max(u.values)) ** 6 / k,
            "status": "certified" if rel <= 1e-8 else f"uncertified ({rel:.1e})",
        }
        for a in alphas:
            row[f"ratio_a{a:g}"] = lp_norm(metric, u, 6.0 * a) ** 6 / k
        return row

    results = _map_rows(one, [float(k) for k in params["k_list"]],
                        spec.threads)
    header = ["k", "sup_u", "sup_ratio"] \
        + [f"ratio_a{a:g}" for a in alphas] + ["status"]
    rows = [[_fmt(r.get(h)) for h in header] for r in results]

    summary = {}
    good = [r for r in results if "sup_ratio" in r]
    if len(good) >= 2:
        first, last = good[0], good[-1]
        summary["sup_ratio_growth"] = last["sup_ratio"] / first["sup_ratio"]
        summary["sup_verdict"] = (
            "unbounded" if summary["sup_ratio_growth"] >= 10.0 else "bounded")
        for a in alphas:
            col = [r[f"ratio_a{a:g}"] for r in good]
            growth = max(col) / min(col)
            summary[f"alpha_{a:g}"] = {
                "max_over_min": growth,
                "verdict": "unbounded" if growth >= 10.0 else "bounded",
            }
    tau_int = {}
    for a in alphas:
        cap = 1e12
        vals = np.minimum(np.abs(tau.values) ** (-a), cap)
        v = integrate(metric, ScalarField(grid, vals))
        tau_int[f"alpha_{a:g}"] = math.inf if np.any(
            vals >= cap) else float(v)
    summary["tau_inverse_integrals"] = {
        k: ("inf" if math.isinf(v) else v) for k, v in tau_int.items()}
    return header, rows, summary


# ---------------------------------------------------------------------------
# threshold bisections


def _near_rows(spec, params, grid, cfg):
    lo = float(params["eps_lo"])
    hi = float(params["eps_hi"])
    if not 0.0 < lo < hi:
        raise ValidationError("need 0 < eps_lo < eps_hi", field="eps_lo")
    evals = []

    def probe(eps):
        data = build_fixture(spec.fixture, grid, overrides={"xi_eps": eps})
        try:
            phi, w_field, trace = picard_solve(data, cfg=cfg)
        except BlowUp:
            out = {"outcome": "blow_up", "converged": False}
        except NoConvergence:
            out = {"outcome": "no_convergence", "converged": False}
        except Exception as exc:
            out = {"outcome": f"error: {type(exc).__name__}",
                   "converged": False}
        else:
            cert = certify(data, phi, w_field)
            out = {
                "outcome": trace.outcome,
                "converged": bool(cert.certified),
                "sup_phi": float(np.max(phi.values)),
                "lich_residual": cert.lich_residual,
                "vector_residual": cert.vector_residual,
            }
        out["eps"] = eps
        evals.append(out)
        return out["converged"]

    summary = {}
    ok_lo = probe(lo)
    ok_hi = probe(hi)
    if ok_lo == ok_hi:
        summary["bracket"] = "none"
        summary["note"] = ("no convergence transition inside "
                           f"[{lo:g}, {hi:g}]")
    else:
        # keep the converging end at lo by swapping roles if inverted
        flip = not ok_lo
        a, b = (lo, hi)
        for _ in range(int(params["max_evals"])):
            if (b - a) <= 0.1 * b:
                break
            mid = math.sqrt(a * b)
            ok = probe(mid)
            if ok != flip:
                a = mid
            else:
                b = mid
        summary["bracket"] = {"eps_converged": a, "eps_diverged": b,
                              "rel_width": (b - a) / b}

    header = ["eps", "outcome", "converged", "sup_phi",
              "lich_residual", "vector_residual"]
    rows = [[_fmt(e.get(h)) for h in header] for e in evals]
    return header, rows, summary


def _far_rows(spec, params, grid, cfg):
    lo, hi = params["s_lo"], params["s_hi"]
    if lo is None or hi is None:
        raise ValidationError(
            "far_cmc_bisect needs s_lo and s_hi", field="s_lo")
    lo, hi = float(lo), float(hi)
    if not 0.0 < lo < hi:
        raise ValidationError("need 0 < s_lo < s_hi", field="s_lo")
    evals = []

    def probe(s):
        data = build_fixture(spec.fixture, grid,
                             overrides={"sigma_l2sq": s})
        try:
            rep = far_cmc_defect_iterate(data, cfg=cfg)
        except Exception as exc:
            out = {"outcome": f"error: {type(exc).__name__}"}
            zero = None
        else:
            zero = rep.outcome == "zero_fixed_point"
            out = {
                "outcome": rep.outcome,
                "iterations": rep.iterations,
                "certified": rep.details.get("certified"),
                "threshold_left": rep.details.get("threshold_left"),
                "threshold_right": rep.details.get("threshold_right"),
            }
        out["sigma_l2sq"] = s
        evals.append(out)
        return zero

    summary = {}
    z_lo = probe(lo)
    z_hi = probe(hi)
    if z_lo is None or z_hi is None or z_lo == z_hi:
        summary["bracket"] = "none"
        summary["note"] = (f"no branch transition inside [{lo:g}, {hi:g}]")
    else:
        a, b = lo, hi
        zero_at_a = z_lo
        for _ in range(int(params["max_evals"])):
            if (b - a) <= 0.1 * b:
                break
            mid = math.sqrt(a * b)
            if probe(mid) == zero_at_a:
                a = mid
            else:
                b = mid
        lo_label = "zero_branch" if zero_at_a else "nonzero_branch"
        hi_label = "nonzero_branch" if zero_at_a else "zero_branch"
        summary["bracket"] = {f"s_{lo_label}": a, f"s_{hi_label}": b,
                              "rel_width": (b - a) / b}

    header = ["sigma_l2sq", "outcome", "iterations", "certified",
              "threshold_left", "threshold_right"]
    rows = [[_fmt(e.get(h)) for h in header] for e in evals]
    return header, rows, summary


# ---------------------------------------------------------------------------
# scaling equivalence


def _scaling_rows(spec, params, grid, cfg):
    data = build_fixture(spec.fixture, grid)
    phi, w_field, trace = picard_solve(data, cfg=cfg)
    base = certify(data, phi, w_field)

    def one(c):
        c = float(c)
        try:
            data_c, phi_c, w_c = scaling_transform(data, phi, w_field, c)
            cert = certify(data_c, phi_c, w_c)
            phi_d, w_d, _ = picard_solve(data_c, cfg=cfg)
            direct_gap = float(np.max(np.abs(phi_d.values - phi_c.values))) \
                / float(np.max(phi_c.values))
            return {
                "c": c,
                "lich_residual": cert.lich_residual,
                "vector_residual": cert.vector_residual,
                "direct_sup_gap": direct_gap,
                "status": "certified" if cert.certified else "uncertified",
            }
        except Exception as exc:
            return {"c": c, "status": f"error: {type(exc).__name__}"}

    results = _map_rows(one, [float(c) for c in params["c_list"]],
                        spec.threads)
    header = ["c", "lich_residual", "vector_residual", "direct_sup_gap",
              "status"]
    rows = [[_fmt(r.get(h)) for h in header] for r in results]
    summary = {
        "base_lich_residual": base.lich_residual,
        "base_vector_residual": base.vector_residual,
        "all_certified": all(r.get("status") == "certified"
                             for r in results),
    }
    return header, rows, summary


# ---------------------------------------------------------------------------
# continuation atlas


def _atlas_rows(spec, params, grid, cfg):
    data = build_fixture(spec.fixture, grid)
    t_grid = [float(t) for t in params["t_grid"]]
    trace = schaefer_continuation(data, t_grid, cfg=cfg)
    header = ["t", "sup_psi", "picard_iters", "lich_residual",
              "vector_residual", "lw_l2"]
    rows = [[_fmt(r.get(h)) for h in header] for r in trace.records]
    summary = {"outcome": trace.outcome}
    if trace.outcome == "blow_up" and len(trace.tail) >= 2:
        try:
            diag = limit_diagnostic(data, trace.tail)
            summary["limit_diagnostic"] = {
                "alpha0": diag.alpha0,
                "profile_error": diag.profile_error,
                "limit_residual": diag.limit_residual,
            }
        except Exception as exc:
            summary["limit_diagnostic"] = f"unavailable: {type(exc).__name__}"
    return header, rows, summary


_RUNNERS = {
    "blowup_sweep": _sweep_rows,
    "dichotomy": _sweep_rows,
    "near_cmc_bisect": _near_rows,
    "far_cmc_bisect": _far_rows,
    "scaling_matrix": _scaling_rows,
    "continuation_atlas": _atlas_rows,
}
