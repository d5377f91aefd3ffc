"""Run configuration: solver options and the INI-style config file.

All paths in a config file are resolved relative to the file itself, so a
config directory can be moved wholesale.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields as dc_fields

from .errors import ParseError, ValidationError
from .grid_geometry import GridSpec


@dataclass
class SolverOptions:
    """Tolerances and budgets shared by the scalar, vector, and coupled
    solvers.  tol is relative to the problem scale."""

    tol: float = 1e-9
    max_newton: int = 50
    max_monotone: int = 4000
    method: str = "auto"  # auto | newton | monotone
    pcg_tol: float = 1e-11
    pcg_maxit: int = 4000
    relax: float = 0.5
    picard_tol: float = 1e-10
    picard_max_iter: int = 200
    ceiling: float = 1e6
    growth_limit: float = 10.0

    def validate(self):
        for name in ("tol", "pcg_tol", "relax", "picard_tol", "ceiling"):
            if not getattr(self, name) > 0:
                raise ValidationError("must be positive", field=name)
        for name in ("max_newton", "max_monotone", "pcg_maxit",
                     "picard_max_iter"):
            if getattr(self, name) < 1:
                raise ValidationError("must be at least 1", field=name)
        if self.method not in ("auto", "newton", "monotone"):
            raise ValidationError(
                "must be auto, newton, or monotone", field="method"
            )
        if self.relax > 1.0:
            raise ValidationError("must lie in (0, 1]", field="relax")
        if self.growth_limit <= 1.0:
            raise ValidationError("must exceed 1", field="growth_limit")


@dataclass
class RunConfig:
    grid: GridSpec
    fixture: str | None = None
    fixture_params: dict = field(default_factory=dict)
    field_paths: dict = field(default_factory=dict)
    solver: SolverOptions = field(default_factory=SolverOptions)
    output_dir: str = "out"
    seed: int = 0
    threads: int = 0  # 0 = CFORGE_THREADS env var, else cpu count


_SECTIONS = ("grid", "fixture", "fields", "solver", "run")
_GRID_KEYS = ("n", "box_length")
_FIELD_KEYS = ("metric", "tau", "sigma", "xi")
_RUN_KEYS = ("output_dir", "seed", "threads")


def _coerce(raw: str, like, key: str):
    kind = type(like)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ValidationError(
            f"cannot read {raw!r} as {kind.__name__}", field=key
        ) from None


def parse_config(path: str) -> RunConfig:
    """Read and validate a config file.

    Sections: [grid] n, box_length; [fixture] name plus numeric overrides;
    [fields] metric/tau/sigma/xi dump paths (alternative to [fixture]);
    [solver] any SolverOptions attribute; [run] output_dir, seed, threads.
    Unknown sections or keys are rejected.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}") from None
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ParseError(str(exc), line=line) from None
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ValidationError("unknown section", field=section)

    base = os.path.dirname(os.path.abspath(path))

    n = 32
    box = 1.0
    if cp.has_section("grid"):
        for key in cp["grid"]:
            if key not in _GRID_KEYS:
                raise ValidationError("unknown key", field=f"grid.{key}")
        if cp.has_option("grid", "n"):
            n = _coerce(cp["grid"]["n"], 0, "grid.n")
        if cp.has_option("grid", "box_length"):
            box = _coerce(cp["grid"]["box_length"], 0.0, "grid.box_length")
    try:
        grid = GridSpec(n, box)
    except ValueError as exc:
        raise ValidationError(str(exc), field="grid") from None

    fixture = None
    fixture_params: dict = {}
    if cp.has_section("fixture"):
        if not cp.has_option("fixture", "name"):
            raise ValidationError("name is required", field="fixture.name")
        fixture = cp["fixture"]["name"].strip()
        for key, raw in cp["fixture"].items():
            if key == "name":
                continue
            fixture_params[key] = _coerce(raw, 0.0, f"fixture.{key}")

    field_paths: dict = {}
    if cp.has_section("fields"):
        for key, raw in cp["fields"].items():
            if key not in _FIELD_KEYS:
                raise ValidationError("unknown key", field=f"fields.{key}")
            field_paths[key] = os.path.join(base, raw.strip())
        if "metric" not in field_paths or "tau" not in field_paths:
            raise ValidationError(
                "metric and tau paths are required", field="fields"
            )

    if (fixture is None) == (not field_paths):
        raise ValidationError(
            "exactly one of [fixture] and [fields] must be given",
            field="fixture",
        )

    solver = SolverOptions()
    if cp.has_section("solver"):
        known = {f.name: f for f in dc_fields(SolverOptions)}
        for key, raw in cp["solver"].items():
            if key not in known:
                raise ValidationError("unknown key", field=f"solver.{key}")
            if key == "method":
                solver.method = raw.strip()
            else:
                setattr(
                    solver, key,
                    _coerce(raw, getattr(solver, key), f"solver.{key}"),
                )
    solver.validate()

    output_dir = os.path.join(base, "out")
    seed = 0
    threads = 0
    if cp.has_section("run"):
        for key in cp["run"]:
            if key not in _RUN_KEYS:
                raise ValidationError("unknown key", field=f"run.{key}")
        if cp.has_option("run", "output_dir"):
            output_dir = os.path.join(base, cp["run"]["output_dir"].strip())
        if cp.has_option("run", "seed"):
            seed = _coerce(cp["run"]["seed"], 0, "run.seed")
            if seed < 0:
                raise ValidationError("must be nonnegative", field="run.seed")
        if cp.has_option("run", "threads"):
            threads = _coerce(cp["run"]["threads"], 0, "run.threads")
            if threads < 0:
                raise ValidationError(
                    "must be nonnegative", field="run.threads"
                )

    return RunConfig(
        grid=grid,
        fixture=fixture,
        fixture_params=fixture_params,
        field_paths=field_paths,
        solver=solver,
        output_dir=output_dir,
        seed=seed,
        threads=threads,
    )


def worker_count(cfg_threads: int) -> int:
    """Resolve the worker cap: explicit config beats CFORGE_THREADS beats
    the machine's cpu count."""
    if cfg_threads > 0:
        return cfg_threads
    env = os.environ.get("CFORGE_THREADS", "").strip()
    if env:
        try:
            k = int(env)
        except ValueError:
            raise ValidationError(
                "CFORGE_THREADS must be an integer", field="CFORGE_THREADS"
            ) from None
        if k > 0:
            return k
    return os.cpu_count() or 1
