"""Named analytic fixtures.

Every metric, tau, and sigma used by the studies and the command line is
an analytic formula registered by id in fixtures.cfg, so a table row can
cite exactly which data produced it.  Builders take the registry
parameters, already merged with per-run overrides, and evaluate the
formulas on the requested grid; nothing here is random.

Two families:

* coupled fixtures build a full ConstraintData set;
* sweep fixtures build only (metric, tau) for the constant-w sweeps,
  where w is the sweep parameter itself.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass

import numpy as np

from .coupled import ConstraintData, prepare_constraint_data
from .errors import ParseError, ValidationError
from .grid_geometry import (
    GridSpec,
    Metric,
    OneFormField,
    ScalarField,
    SymTensorField,
    build_metric,
    exterior_derivative,
    flat_metric,
    integrate,
    sym_index,
    tensor_norm2,
)

_REGISTRY_PATH = os.path.join(os.path.dirname(__file__), "fixtures.cfg")


@dataclass
class FixtureSpec:
    name: str
    version: int
    kind: str  # coupled | sweep
    description: str
    params: dict


def _load_registry() -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(_REGISTRY_PATH, "r", encoding="utf-8") as fh:
            cp.read_file(fh, source=_REGISTRY_PATH)
    except OSError as exc:
        raise ParseError(f"cannot read fixture registry: {exc}") from None
    reg = {}
    for name in cp.sections():
        sec = cp[name]
        params = {}
        for key, raw in sec.items():
            if key in ("version", "kind", "description"):
                continue
            params[key] = float(raw)
        reg[name] = FixtureSpec(
            name=name,
            version=sec.getint("version"),
            kind=sec.get("kind"),
            description=sec.get("description", "").strip(),
            params=params,
        )
    return reg


_registry_cache = None


def registry() -> dict:
    global _registry_cache
    if _registry_cache is None:
        _registry_cache = _load_registry()
    return _registry_cache


def fixture_names() -> list:
    return sorted(registry())


# ---------------------------------------------------------------------------
# metric formulas


def bumpy_metric(grid: GridSpec, eps: float = 0.05,
                 curv_shift: float = 0.0) -> Metric:
    """Diagonal metric 1 + eps * (mixed trig waves), one wave per axis.

    The waves share no symmetry axis, which kills the conformal Killing
    fields the flat torus carries.  curv_shift, when nonzero, replaces
    the scalar curvature by the computed one plus the shift; the shifted
    operator 8 lap + R is what the positive-sign fixtures run on.
    """
    x, y, z = grid.coords
    b1 = np.sin(2 * np.pi * x + 1.3) * np.cos(2 * np.pi * y + 0.4) \
        + 0.5 * np.sin(2 * np.pi * z + 2.1)
    b2 = np.cos(2 * np.pi * x + 2.2) * np.sin(2 * np.pi * z + 0.7) \
        + 0.5 * np.cos(2 * np.pi * y + 1.1)
    b3 = np.sin(2 * np.pi * y + 0.2) * np.sin(2 * np.pi * z + 1.9) \
        + 0.5 * np.cos(2 * np.pi * x + 0.5)
    g6 = np.zeros((6,) + grid.shape)
    g6[sym_index(0, 0)] = 1.0 + eps * b1
    g6[sym_index(1, 1)] = 1.0 + eps * b2
    g6[sym_index(2, 2)] = 1.0 + eps * b3
    m = build_metric(grid, g6)
    if curv_shift == 0.0:
        return m
    return build_metric(grid, g6,
                        scalar_curvature=m.scalar_curvature + curv_shift)


# The curvature eigenvalue and Killing-kernel detectors cache their work
# on the Metric instance, so parameter scans that touch only tau, sigma,
# or xi must get the same instance back.  Keyed by every input the metric
# formulas read.
_metric_cache = {}


def _metric_for(grid: GridSpec, params: dict) -> Metric:
    kind = int(params.get("metric", 0))
    key = (kind, params.get("eps", 0.05), params.get("curv_shift", 0.0),
           grid.n_axis, grid.box_length)
    m = _metric_cache.get(key)
    if m is None:
        if kind == 0:
            m = flat_metric(grid)
        else:
            m = bumpy_metric(grid, eps=params.get("eps", 0.05),
                             curv_shift=params.get("curv_shift", 0.0))
        _metric_cache[key] = m
    return m


# ---------------------------------------------------------------------------
# sigma formulas


def constant_tt_sigma(grid: GridSpec, c: float) -> SymTensorField:
    """sigma_12 = sigma_21 = c, everything else 0: the constant
    transverse traceless tensor, |sigma| = c sqrt(2) under the flat
    metric."""
    s6 = np.zeros((6,) + grid.shape)
    s6[sym_index(0, 1)] = c
    return SymTensorField(grid, s6)


def wave_tt_sigma(grid: GridSpec, amp: float) -> SymTensorField:
    """Plus-polarized plane wave along z: sigma_11 = -sigma_22 =
    amp cos(2 pi z).  Transverse traceless under the flat metric; under
    the bumpy metrics it is trace-free to O(eps) only, which the coupled
    machinery never relies on."""
    _, _, z = grid.coords
    s6 = np.zeros((6,) + grid.shape)
    s6[sym_index(0, 0)] = amp * np.cos(2 * np.pi * z / grid.box_length)
    s6[sym_index(1, 1)] = -amp * np.cos(2 * np.pi * z / grid.box_length)
    return SymTensorField(grid, s6)


def concentrated_sigma(grid: GridSpec, power: float) -> SymTensorField:
    """Trace-free tensor concentrated around y = z = 0:
    sigma_11 = -sigma_22 = ((1+cos 2 pi y)(1+cos 2 pi z)/4)^power.

    High L6-to-L2 ratio is the point: the far-from-constant-tau branch
    threshold compares (integral phi^24)^(1/3) against integral
    |sigma|^2, and concentration is what pushes data outside that
    regime at fixed L2 size."""
    _, y, z = grid.coords
    two_pi = 2 * np.pi / grid.box_length
    f = (0.25 * (1 + np.cos(two_pi * y)) * (1 + np.cos(two_pi * z))) ** power
    s6 = np.zeros((6,) + grid.shape)
    s6[sym_index(0, 0)] = f
    s6[sym_index(1, 1)] = -f
    return SymTensorField(grid, s6)


def normalize_sigma(metric: Metric, sigma: SymTensorField,
                    target_l2sq: float) -> SymTensorField:
    """Rescale so the volume integral of |sigma|^2 equals target_l2sq."""
    cur = integrate(metric, tensor_norm2(metric, sigma))
    if cur <= 0.0:
        raise ValidationError("cannot normalize a vanishing sigma",
                              field="sigma")
    scale = math.sqrt(target_l2sq / cur)
    return SymTensorField(metric.grid, sigma.components * scale)


# ---------------------------------------------------------------------------
# tau formulas


def _tau_for(grid: GridSpec, params: dict) -> ScalarField:
    kind = int(params.get("tau", 0))
    x = grid.coords[0]
    two_pi = 2 * np.pi / grid.box_length
    if kind == 0:
        return ScalarField.constant(grid, params.get("tau_value", 1.0))
    if kind == 1:
        a = params.get("tau_eps", 0.01)
        return ScalarField(grid, 1.0 + a * np.sin(two_pi * x))
    if kind == 2:
        s = params.get("tau_steep", 4.0)
        return ScalarField(grid, np.exp(s * np.sin(two_pi * x)))
    if kind == 3:
        return ScalarField(grid, np.sin(two_pi * x))
    raise ValidationError(f"unknown tau formula {kind}", field="tau")


def _sigma_for(metric: Metric, params: dict) -> SymTensorField:
    grid = metric.grid
    kind = int(params.get("sigma", 0))
    if kind == 0:
        sig = constant_tt_sigma(grid, params.get("sigma_c", 1.0 / math.sqrt(2.0)))
    elif kind == 1:
        sig = wave_tt_sigma(grid, params.get("sigma_amp", 1e-2))
    elif kind == 2:
        sig = concentrated_sigma(grid, params.get("sigma_power", 12.0))
    else:
        raise ValidationError(f"unknown sigma formula {kind}", field="sigma")
    target = params.get("sigma_l2sq", 0.0)
    if target > 0.0:
        sig = normalize_sigma(metric, sig, target)
    return sig


# ---------------------------------------------------------------------------
# assembly


def build_fixture(name: str, grid: GridSpec, overrides: dict = None) -> ConstraintData:
    """Evaluate a registered coupled fixture on a grid.

    overrides update the registry parameters key by key; unknown keys
    are rejected so a typo cannot silently produce a different data set.
    """
    spec = registry().get(name)
    if spec is None:
        raise ValidationError(f"unknown fixture {name!r}", field="fixture")
    if spec.kind != "coupled":
        raise ValidationError(f"{name} is a {spec.kind} fixture",
                              field="fixture")
    params = dict(spec.params)
    for key, val in (overrides or {}).items():
        if key not in params:
            raise ValidationError(f"fixture {name} has no parameter {key!r}",
                                  field=key)
        params[key] = float(val)

    metric = _metric_for(grid, params)
    tau = _tau_for(grid, params)
    sigma = _sigma_for(metric, params)
    xi = None
    xi_eps = params.get("xi_eps")
    if xi_eps is not None:
        dtau = exterior_derivative(tau)
        xi = OneFormField(grid, xi_eps * dtau.components)
    return prepare_constraint_data(metric, tau, sigma, xi=xi)


def build_sweep_fixture(name: str, grid: GridSpec, overrides: dict = None):
    """Evaluate a registered sweep fixture: returns (metric, tau)."""
    spec = registry().get(name)
    if spec is None:
        raise ValidationError(f"unknown fixture {name!r}", field="fixture")
    if spec.kind != "sweep":
        raise ValidationError(f"{name} is a {spec.kind} fixture",
                              field="fixture")
    params = dict(spec.params)
    for key, val in (overrides or {}).items():
        if key not in params:
            raise ValidationError(f"fixture {name} has no parameter {key!r}",
                                  field=key)
        params[key] = float(val)
    metric = _metric_for(grid, params)
    tau = _tau_for(grid, params)
    return metric, tau
