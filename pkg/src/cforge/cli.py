"""Command line front end.

Every subcommand resolves its data set the same way (a registered
fixture or a parsed config file), runs one piece of the machinery, and
writes a run summary next to any requested field dumps.  Exit codes are
part of the contract:

    0   the run produced a certified result
    2   the run completed but without a certificate (blow-up branches,
        zero fixed points, stagnation); the summary says which
    1   bad input or an internal failure

so scripts can tell "the alternative happened" apart from "the tool
broke".
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import SolverOptions, parse_config
from .coupled import (
    certify,
    far_cmc_defect_iterate,
    limit_diagnostic,
    map_T,
    modified_continuation_t12,
    near_cmc_defect_iterate,
    local_supersolution_solve,
    picard_solve,
    prepare_constraint_data,
    schaefer_continuation,
)
from .errors import (
    BlowUp,
    CforgeError,
    ContinuationNotFound,
    InsufficientBlowUp,
    NoConvergence,
    ParseError,
    PreconditionFailed,
    ValidationError,
)
from .fieldio import dump_field, load_field, write_summary
from .fixtures import build_fixture, build_sweep_fixture, fixture_names, registry
from .grid_geometry import (
    GridSpec,
    OneFormField,
    ScalarField,
    SymTensorField,
    build_metric,
    integrate,
    tensor_norm2,
)
from .lichnerowicz import LichnerowiczProblem, _residual_arr, _scale
from .lichnerowicz import solve as lich_solve
from .studies import StudySpec, run_study
from .vector_solver import VectorProblem, assemble_rhs, lw_norms, solve_vector

# exceptions that mean "the run finished and this is the answer, just not
# a certified fixed point"; everything else CforgeError-shaped is usage
_UNCERTIFIED = (BlowUp, NoConvergence, InsufficientBlowUp,
                ContinuationNotFound)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the tool reserves 2 for
    # ran-uncertified, so usage errors are remapped to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _add_common(p, grid_flags=True):
    p.add_argument("--config", help="run config file (INI)")
    p.add_argument("--fixture", help="registered fixture name")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                   help="override a fixture parameter (repeatable)")
    if grid_flags:
        p.add_argument("--n", type=int, default=32,
                       help="grid points per axis (default 32)")
        p.add_argument("--box", type=float, default=1.0,
                       help="box side length (default 1.0)")
    p.add_argument("--solver", action="append", default=[], metavar="KEY=VAL",
                   help="override a solver option (repeatable)")
    p.add_argument("--out", help="output directory (default: config "
                   "output_dir, else current directory)")
    p.add_argument("--dump-fields", action="store_true",
                   help="dump solution fields next to the summary")


def _parse_kv(pairs, what):
    out = {}
    for item in pairs:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"expected KEY=VAL, got {item!r}",
                                  field=what)
        out[key] = val
    return out


def _solver_from(args, base: SolverOptions) -> SolverOptions:
    cfg = replace(base)
    for key, val in _parse_kv(args.solver, "solver").items():
        if not hasattr(cfg, key):
            raise ValidationError(f"unknown solver option {key!r}", field=key)
        cur = getattr(cfg, key)
        setattr(cfg, key, type(cur)(val))
    cfg.validate()
    return cfg


def _data_from_dumps(paths: dict, base: str):
    fields = {}
    grid = None
    for key, rel in paths.items():
        f = load_field(rel if os.path.isabs(rel) else os.path.join(base, rel))
        fields[key] = f
        grid = f.grid
    metric = build_metric(grid, fields["metric"].components)
    sigma = fields.get("sigma")
    if sigma is None:
        # a missing sigma means sigma = 0, and the data vetting decides
        # whether that is admissible for this metric
        sigma = SymTensorField(grid, np.zeros((6,) + grid.shape))
    return prepare_constraint_data(
        metric, ScalarField(grid, fields["tau"].values), sigma,
        xi=fields.get("xi"))


class _Run:
    """Resolved inputs for one invocation."""

    def __init__(self, args, kind="coupled"):
        if args.config and args.fixture:
            raise ValidationError("give either --config or --fixture, not both",
                                  field="config")
        self.cfg_dir = "."
        self.seed = 0
        self.threads = 0
        if args.config:
            rc = parse_config(args.config)
            self.cfg_dir = os.path.dirname(os.path.abspath(args.config))
            self.grid = rc.grid
            self.seed, self.threads = rc.seed, rc.threads
            self.out = args.out or rc.output_dir
            self.solver = _solver_from(args, rc.solver)
            if rc.fixture:
                self.fixture = rc.fixture
                self.overrides = dict(rc.fixture_params)
            else:
                self.fixture = None
                self.data = _data_from_dumps(rc.field_paths, self.cfg_dir)
                self.grid = self.data.metric.grid
        elif args.fixture:
            self.grid = GridSpec(args.n, args.box)
            self.fixture = args.fixture
            self.overrides = _parse_kv(args.set, "set")
            self.out = args.out or "."
            self.solver = _solver_from(args, SolverOptions())
        else:
            raise ValidationError("need --fixture or --config", field="fixture")

        if self.fixture is not None:
            if self.fixture not in registry():
                raise ValidationError(
                    f"unknown fixture {self.fixture!r}; known: "
                    + ", ".join(fixture_names()), field="fixture")
            # sweep fixtures carry no sigma; only the scalar-equation
            # command can run them, with an explicit w
            if kind == "lich" and registry()[self.fixture].kind == "sweep":
                self.metric, self.tau = build_sweep_fixture(
                    self.fixture, self.grid, self.overrides or None)
                self.data = None
            else:
                self.data = build_fixture(self.fixture, self.grid,
                                          self.overrides or None)
        if getattr(self, "data", None) is not None:
            for line in self.data.warnings:
                print(f"warning: {line}", file=sys.stderr)
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)


def _flags_block(data):
    f = data.assumption_flags
    return {
        "assumption_flags": {
            "ckv_kernel_dim": f.ckv_kernel_dim,
            "yamabe_sign": f.yamabe_sign,
            "sigma_nontrivial": f.sigma_nontrivial,
            "tau_zero_fraction": f.tau_zero_fraction,
        },
        "yamabe_lambda1": data.yamabe_lambda1,
        "warnings": list(data.warnings),
    }


def _norms(metric, arr):
    f = ScalarField(metric.grid, arr * arr)
    return {
        "sup": float(np.max(arr)),
        "min": float(np.min(arr)),
        "l2": float(np.sqrt(max(integrate(metric, f), 0.0))),
    }


def _verdict(code):
    return {0: "certified", 2: "ran-uncertified"}.get(code, "error")


def _finish(run, name, body, code):
    body["certification"] = _verdict(code)
    write_summary(run.path(name + ".summary.txt"), body, title=name)
    return code


# ---------------------------------------------------------------------------
# subcommands


def _cmd_solve_lich(args):
    run = _Run(args, kind="lich")
    if run.data is None:
        if args.w_const is None:
            raise ValidationError("sweep fixtures need --w-const",
                                  field="w-const")
        metric, tau = run.metric, run.tau
    else:
        metric, tau = run.data.metric, run.data.tau
    if args.w_const is not None:
        w = ScalarField.constant(run.grid, args.w_const)
    else:
        w = ScalarField(run.grid,
                        np.sqrt(np.maximum(
                            tensor_norm2(metric, run.data.sigma).values,
                            0.0)))
    prob = LichnerowiczProblem(metric, tau, w)
    body = {"command": "solve-lich", "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    try:
        rep = lich_solve(prob, run.solver)
    except _UNCERTIFIED as exc:
        body["outcome"] = f"{type(exc).__name__}: {exc}"
        print(f"solve failed to certify: {exc}")
        return _finish(run, "solve-lich", body, 2)
    rel = float(np.max(np.abs(_residual_arr(prob, rep.u.values))))
    rel /= _scale(prob, rep.u.values)
    code = 0 if rel <= 1e-8 else 2
    body["trace"] = {"method": rep.method, "iterations": rep.iterations,
                     "residual_sup": rep.residual_sup}
    body["norms"] = {"u": _norms(metric, rep.u.values)}
    body["relative_residual"] = rel
    print(f"sup u = {float(np.max(rep.u.values)):.6f}")
    print(f"{_verdict(code)}: relative residual {rel:.3e} "
          f"({rep.method}, {rep.iterations} iterations)")
    if args.dump_fields:
        dump_field(rep.u, run.path("u.bin"))
    return _finish(run, "solve-lich", body, code)


def _cmd_solve_vector(args):
    run = _Run(args)
    data = run.data
    phi = ScalarField.constant(run.grid, args.phi_const)
    rhs = assemble_rhs(data.metric, phi, data.xi)
    rep = solve_vector(VectorProblem(data.metric, rhs, data.kernel),
                       run.solver)
    sup_lw, l2_lw = lw_norms(data.metric, rep.w_field)
    code = 0 if rep.rel_residual <= 1e-8 else 2
    body = {"command": "solve-vector", "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    body.update(_flags_block(data))
    body["trace"] = {"iterations": rep.iterations,
                     "rel_residual": rep.rel_residual,
                     "projected_rhs_fraction": rep.projected_rhs_fraction}
    body["norms"] = {"lw_sup": sup_lw, "lw_l2": l2_lw}
    print(f"|LW| sup = {sup_lw:.6e}, volume-L2 = {l2_lw:.6e}")
    print(f"{_verdict(code)}: relative residual {rep.rel_residual:.3e}")
    if args.dump_fields:
        dump_field(rep.w_field, run.path("w_vector.bin"))
    return _finish(run, "solve-vector", body, code)


def _cmd_solve_coupled(args):
    run = _Run(args)
    data = run.data
    body = {"command": "solve-coupled", "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    body.update(_flags_block(data))
    try:
        phi, w_field, trace = picard_solve(data, cfg=run.solver)
    except _UNCERTIFIED as exc:
        body["outcome"] = f"{type(exc).__name__}"
        body["detail"] = str(exc)
        partial = getattr(exc, "trace", None)
        if partial is not None:
            body["trace"] = partial.records
        print(f"picard did not certify: {type(exc).__name__}: {exc}")
        return _finish(run, "solve-coupled", body, 2)
    cert = certify(data, phi, w_field)
    code = 0 if cert.certified else 2
    body["outcome"] = trace.outcome
    body["trace"] = trace.records
    body["norms"] = {"phi": _norms(data.metric, phi.values)}
    body["residuals"] = {"lichnerowicz": cert.lich_residual,
                         "vector": cert.vector_residual}
    print(f"sup phi = {float(np.max(phi.values)):.6f} "
          f"({len(trace.records)} picard steps)")
    print(f"{_verdict(code)}: residuals {cert.lich_residual:.3e} / "
          f"{cert.vector_residual:.3e}")
    if args.dump_fields:
        dump_field(phi, run.path("phi.bin"))
        dump_field(w_field, run.path("w_vector.bin"))
    return _finish(run, "solve-coupled", body, code)


def _parse_t_grid(text):
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise ValidationError(f"bad t grid {text!r}", field="t-grid") from None


def _continuation_body(run, data, trace):
    body = {"command": "continuation", "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    body.update(_flags_block(data))
    body["outcome"] = trace.outcome
    body["trace"] = trace.records
    return body


def _cmd_continuation(args):
    run = _Run(args)
    data = run.data
    trace = schaefer_continuation(data, _parse_t_grid(args.t_grid),
                                  cfg=run.solver)
    body = _continuation_body(run, data, trace)
    for rec in trace.records:
        print(f"  t={rec['t']:.3f}  sup={rec['sup_psi']:.4e}  "
              f"picard={rec['picard_iters']}")
    if trace.outcome == "converged_full" and trace.tail:
        phi, w_field, _ = trace.tail[-1]
        cert = certify(data, phi, w_field)
        code = 0 if cert.certified else 2
        body["residuals"] = {"lichnerowicz": cert.lich_residual,
                             "vector": cert.vector_residual}
        body["norms"] = {"phi": _norms(data.metric, phi.values)}
        print(f"{_verdict(code)}: full branch reached t=1, sup phi = "
              f"{float(np.max(phi.values)):.6f}")
        if args.dump_fields:
            dump_field(phi, run.path("phi.bin"))
            dump_field(w_field, run.path("w_vector.bin"))
        return _finish(run, "continuation", body, code)
    if trace.outcome == "blow_up":
        print("iterates passed the ceiling: unbounded family, "
              "running the rescaled limit diagnostic")
        try:
            diag = limit_diagnostic(data, trace.tail)
            body["limit_diagnostic"] = {
                "alpha0": diag.alpha0,
                "profile_error": diag.profile_error,
                "limit_residual": diag.limit_residual,
            }
            print(f"  alpha0 = {diag.alpha0:.4f}  profile_error = "
                  f"{diag.profile_error:.3e}  limit_residual = "
                  f"{diag.limit_residual:.3e}")
        except CforgeError as exc:
            body["limit_diagnostic"] = f"unavailable: {exc}"
            print(f"  limit diagnostic unavailable: {exc}")
    else:
        print(f"continuation stalled: {trace.outcome}")
    return _finish(run, "continuation", body, 2)


def _cmd_modified_continuation(args):
    run = _Run(args)
    data = run.data
    body = {"command": "modified-continuation", "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    body.update(_flags_block(data))
    try:
        alpha, phi, w_field = modified_continuation_t12(
            data, _parse_t_grid(args.t_grid), cfg=run.solver)
    except _UNCERTIFIED as exc:
        body["outcome"] = f"{type(exc).__name__}"
        body["detail"] = str(exc)
        print(f"no converged step: {exc}")
        return _finish(run, "modified-continuation", body, 2)
    grid = data.metric.grid
    data_a = replace(data,
                     tau=ScalarField(grid, alpha * data.tau.values),
                     xi=OneFormField(grid, alpha * data.xi.components))
    cert = certify(data_a, phi, w_field)
    code = 0 if cert.certified else 2
    body["alpha"] = alpha
    body["residuals"] = {"lichnerowicz": cert.lich_residual,
                         "vector": cert.vector_residual}
    body["norms"] = {"phi": _norms(data.metric, phi.values)}
    print(f"largest converged alpha = {alpha:.6f}, sup phi = "
          f"{float(np.max(phi.values)):.6f}")
    print(f"{_verdict(code)}: residuals {cert.lich_residual:.3e} / "
          f"{cert.vector_residual:.3e}")
    if args.dump_fields:
        dump_field(phi, run.path("phi.bin"))
    return _finish(run, "modified-continuation", body, code)


def _cmd_limit_diagnostic(args):
    run = _Run(args)
    data = run.data
    trace = schaefer_continuation(data, _parse_t_grid(args.t_grid),
                                  cfg=run.solver)
    body = _continuation_body(run, data, trace)
    body["command"] = "limit-diagnostic"
    if trace.outcome != "blow_up":
        body["detail"] = "continuation did not blow up; nothing to rescale"
        print(f"continuation outcome {trace.outcome}; no unbounded family")
        return _finish(run, "limit-diagnostic", body, 2)
    try:
        diag = limit_diagnostic(data, trace.tail)
    except InsufficientBlowUp as exc:
        body["detail"] = str(exc)
        print(f"tail too shallow to rescale: {exc}")
        return _finish(run, "limit-diagnostic", body, 2)
    body["limit_diagnostic"] = {
        "alpha0": diag.alpha0,
        "profile_error": diag.profile_error,
        "limit_residual": diag.limit_residual,
    }
    print(f"alpha0 = {diag.alpha0:.4f}")
    print(f"profile_error = {diag.profile_error:.3e}")
    print(f"limit_residual = {diag.limit_residual:.3e}")
    return _finish(run, "limit-diagnostic", body, 0)


def _defect_common(args, name, runner):
    run = _Run(args)
    data = run.data
    body = {"command": name, "fixture": run.fixture,
            "grid": {"n_axis": run.grid.n_axis,
                     "box_length": run.grid.box_length}}
    body.update(_flags_block(data))
    try:
        rep = runner(run, data)
    except (PreconditionFailed, ValidationError):
        raise
    except _UNCERTIFIED as exc:
        body["outcome"] = f"{type(exc).__name__}"
        body["detail"] = str(exc)
        print(f"defect iteration did not settle: {exc}")
        return _finish(run, name, body, 2)
    body["outcome"] = rep.outcome
    body["iterations"] = rep.iterations
    body["branch_log"] = rep.branch_log
    body["details"] = rep.details
    body["residuals"] = {"lichnerowicz": rep.lich_residual,
                         "vector": rep.vector_residual}
    body["norms"] = {"phi": _norms(data.metric, rep.phi.values)}
    certified = rep.outcome == "fixed_point" and bool(
        rep.details.get("certified"))
    code = 0 if certified else 2
    print(f"outcome: {rep.outcome} after {rep.iterations} iterations "
          f"(sup phi = {float(np.max(rep.phi.values)):.6f})")
    print(f"{_verdict(code)}: residuals {rep.lich_residual:.3e} / "
          f"{rep.vector_residual:.3e}")
    if args.dump_fields:
        dump_field(rep.phi, run.path("phi.bin"))
        dump_field(rep.w_field, run.path("w_vector.bin"))
    return _finish(run, name, body, code)


def _cmd_defect_near(args):
    return _defect_common(
        args, "defect-near",
        lambda run, data: near_cmc_defect_iterate(
            data, a=args.truncation, cfg=run.solver))


def _cmd_defect_far(args):
    return _defect_common(
        args, "defect-far",
        lambda run, data: far_cmc_defect_iterate(
            data, a=args.truncation, cfg=run.solver))


def _cmd_defect_local(args):
    def runner(run, data):
        if args.psi_const is not None:
            psi = ScalarField.constant(run.grid, args.psi_const)
        else:
            # candidate: a constant comfortably above one application of
            # the map to the unit field
            t_one, _ = map_T(data, ScalarField.constant(run.grid, 1.0),
                             run.solver)
            psi = ScalarField.constant(
                run.grid, 2.0 * float(np.max(t_one.values)))
        return local_supersolution_solve(data, psi, cfg=run.solver)

    return _defect_common(args, "defect-local", runner)


_LIST_PARAMS = ("k_list", "alpha_list", "c_list", "t_grid")
_INT_PARAMS = ("max_evals",)


def _cmd_study(args):
    params = {}
    for key, val in _parse_kv(args.param, "param").items():
        if key in _LIST_PARAMS:
            params[key] = [float(v) for v in val.split(",") if v.strip()]
        elif key in _INT_PARAMS:
            params[key] = int(val)
        else:
            params[key] = float(val)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    stem = args.output or os.path.join(out, f"{args.kind}-{args.fixture}")
    spec = StudySpec(study_kind=args.kind, fixture=args.fixture,
                     output=stem, params=params, n_axis=args.n,
                     box_length=args.box, threads=args.threads)
    solver = _solver_from(args, SolverOptions())
    result = run_study(spec, cfg=solver)
    print(f"table: {result.table_path}")
    print(f"summary: {result.summary_path}")
    for key in ("sup_verdict", "bracket", "all_certified", "outcome"):
        if key in result.summary:
            print(f"{key}: {result.summary[key]}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    ap = _Parser(prog="cforge",
                 description="constraint-equation laboratory on a periodic "
                 "3-grid")
    sub = ap.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("solve-lich", parents=[], help="scalar equation only")
    _add_common(p)
    p.add_argument("--w-const", type=float, default=None,
                   help="use a constant w instead of |sigma|")
    p.set_defaults(fn=_cmd_solve_lich)

    p = sub.add_parser("solve-vector", help="vector equation only")
    _add_common(p)
    p.add_argument("--phi-const", type=float, default=1.0,
                   help="constant phi weighting the source (default 1)")
    p.set_defaults(fn=_cmd_solve_vector)

    p = sub.add_parser("solve-coupled", help="picard on the coupled system")
    _add_common(p)
    p.set_defaults(fn=_cmd_solve_coupled)

    p = sub.add_parser("continuation",
                       help="solve phi = t T(phi) along a t grid")
    _add_common(p)
    p.add_argument("--t-grid", default="0,0.25,0.5,0.75,1")
    p.set_defaults(fn=_cmd_continuation)

    p = sub.add_parser("modified-continuation",
                       help="continuation in rescaled data (tau, xi)")
    _add_common(p)
    p.add_argument("--t-grid", default="0.25,0.5,0.75,1")
    p.set_defaults(fn=_cmd_modified_continuation)

    p = sub.add_parser("limit-diagnostic",
                       help="rescale a blow-up tail against the limit system")
    _add_common(p)
    p.add_argument("--t-grid", default="0,0.25,0.5,0.75,1")
    p.set_defaults(fn=_cmd_limit_diagnostic)

    p = sub.add_parser("defect-near", help="near-constant-tau defect map")
    _add_common(p)
    p.add_argument("--truncation", type=float, default=None)
    p.set_defaults(fn=_cmd_defect_near)

    p = sub.add_parser("defect-far", help="far-from-constant-tau defect map")
    _add_common(p)
    p.add_argument("--truncation", type=float, default=None)
    p.set_defaults(fn=_cmd_defect_far)

    p = sub.add_parser("defect-local", help="local supersolution defect map")
    _add_common(p)
    p.add_argument("--psi-const", type=float, default=None,
                   help="constant candidate bound (default: auto)")
    p.set_defaults(fn=_cmd_defect_local)

    p = sub.add_parser("study", help="run a scripted campaign")
    p.add_argument("--kind", required=True,
                   choices=("blowup_sweep", "dichotomy", "near_cmc_bisect",
                            "far_cmc_bisect", "scaling_matrix",
                            "continuation_atlas"))
    p.add_argument("--fixture", required=True)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VAL",
                   help="study parameter (lists comma-separated)")
    p.add_argument("--output", help="output stem for the table files")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--box", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--solver", action="append", default=[], metavar="KEY=VAL")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_study)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if not getattr(args, "command", None):
        ap.print_usage(sys.stderr)
        sys.stderr.write("error: a subcommand is required\n")
        return 1
    try:
        return args.fn(args)
    except (ParseError, ValidationError, PreconditionFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CforgeError as exc:
        # solver-level failure without a usable partial answer
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
