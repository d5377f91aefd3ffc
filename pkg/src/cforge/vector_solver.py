"""The vector equation: (1/2) L*L W = -rhs, with rhs = (2/3) phi^6 xi.

L has a kernel on symmetric boxes (translations on the flat torus), so the
right side is projected onto the orthogonal complement before the Krylov
solve and the solution is returned kernel-free.  The fraction removed is
reported; a large value means the data violates the no-kernel-component
assumption the uniqueness argument rests on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._solvers import make_fft_precond, pcg, vdot
from .config import SolverOptions
from .errors import KernelContamination, NonPositive
from .grid_geometry import (
    Metric,
    OneFormField,
    ScalarField,
    _half_lstar_l_plain,
    _m1_apply,
    _m1_inv_apply,
    conformal_killing,
    integrate,
    same_grid,
    tensor_norm2,
)


@dataclass
class VectorProblem:
    metric: Metric
    rhs: OneFormField
    kernel: list = field(default_factory=list)

    def __post_init__(self):
        same_grid(self.metric, self.rhs, *self.kernel)


@dataclass
class VectorSolveReport:
    w_field: OneFormField
    rel_residual: float
    projected_rhs_fraction: float
    iterations: int


def assemble_rhs(metric: Metric, phi: ScalarField,
                 xi: OneFormField) -> OneFormField:
    """(2/3) phi^6 xi, componentwise."""
    same_grid(metric, phi, xi)
    if phi.values.min() < 0.0:
        raise NonPositive("phi must be nonnegative")
    return OneFormField(
        metric.grid, (2.0 / 3.0) * phi.values ** 6 * xi.components
    )


def _dv_dot(m: Metric, a: np.ndarray, b: np.ndarray) -> float:
    # volume inner product of one-forms through the mass operator
    return vdot(a, _m1_apply(m, b))


def solve_vector(p: VectorProblem, cfg: SolverOptions = None
                 ) -> VectorSolveReport:
    """Solve (1/2) L*L W = -rhs for W orthogonal to the supplied kernel.

    Works on the plain-symmetric system B W = -M1 rhs_perp where B is the
    mass-weighted operator, so conjugate gradients applies; the returned
    relative residual is measured in the volume L2 norm.
    """
    if cfg is None:
        cfg = SolverOptions()
    m = p.metric
    grid = m.grid
    h3 = grid.h ** 3
    eta = p.rhs.components

    rhs_norm2 = _dv_dot(m, eta, eta)
    coeffs = [_dv_dot(m, k.components, eta) for k in p.kernel]
    eta_perp = eta.copy()
    for c, k in zip(coeffs, p.kernel):
        eta_perp -= c * k.components
    removed = sum(c * c for c in coeffs)
    frac = np.sqrt(removed / rhs_norm2) if rhs_norm2 > 0.0 else 0.0

    perp_norm2 = _dv_dot(m, eta_perp, eta_perp)
    if perp_norm2 <= 0.0:
        return VectorSolveReport(
            OneFormField.zero(grid), 0.0, float(frac), 0
        )

    mean_sg = float(np.mean(m.sqrt_det))
    kref = (2.0 * np.pi / grid.box_length) ** 2
    pre = make_fft_precond(
        grid.n_axis, grid.h,
        c0=0.02 * kref * h3 * mean_sg,
        scale=(7.0 / 12.0) * h3 * mean_sg,
    )

    # deflation basis: kernel fields re-orthonormalized in plain l2, the
    # inner product B is symmetric in; CG then runs on the deflated
    # operator whose spectrum starts at the first nonkernel eigenvalue
    qs = []
    for k in p.kernel:
        q = k.components.copy()
        for prev in qs:
            q -= vdot(prev, q) * prev
        nrm = np.sqrt(vdot(q, q))
        if nrm > 0.0:
            qs.append(q / nrm)

    def deflate(W):
        for q in qs:
            W = W - vdot(q, W) * q
        return W

    def project(W):
        for k in p.kernel:
            W = W - _dv_dot(m, k.components, W) * k.components
        return W

    if qs:
        def apply_b(W):
            return deflate(_half_lstar_l_plain(m, deflate(W)))

        def precond(r):
            return deflate(pre(r))
    else:
        def apply_b(W):
            return _half_lstar_l_plain(m, W)

        precond = pre

    b = -_m1_apply(m, eta_perp)
    if qs:
        b = deflate(b)
    # quasi-kernel directions outside the deflation set amplify residual
    # into error by the inverse spectral gap, so aim two decades under
    # the reporting tolerance
    inner_tol = max(1e-2 * cfg.tol, 1e-13)
    W, rel, it = pcg(apply_b, b, precond, tol=inner_tol,
                     maxit=cfg.pcg_maxit)
    if p.kernel:
        W = project(W)

    res = _half_lstar_l_plain(m, W) + _m1_apply(m, eta_perp)
    # B-residual against M1-inverse metric equals the volume-L2 residual
    # of the vector-field equation
    rel_residual = float(
        np.sqrt(max(vdot(res, _m1_inv_apply(m, res)), 0.0) / perp_norm2)
    )

    if p.kernel:
        overlap2 = sum(
            _dv_dot(m, k.components, W) ** 2 for k in p.kernel
        )
        wnorm2 = _dv_dot(m, W, W)
        if wnorm2 > 0 and np.sqrt(overlap2 / wnorm2) > 1e-6:
            raise KernelContamination(
                f"solution kernel overlap {np.sqrt(overlap2 / wnorm2):.2e}"
            )
    return VectorSolveReport(
        OneFormField(grid, W), rel_residual, float(frac), it
    )


def lw_norms(metric: Metric, w_field: OneFormField):
    """LW with its volume L2 and sup norms: (l2, sup, lw_tensor)."""
    lw = conformal_killing(metric, w_field)
    n2 = tensor_norm2(metric, lw)
    l2n = float(np.sqrt(max(integrate(metric, n2.values), 0.0)))
    supn = float(np.sqrt(max(np.max(n2.values), 0.0)))
    return l2n, supn, lw
