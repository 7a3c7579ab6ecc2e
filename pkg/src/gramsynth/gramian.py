"""Trajectory-dependent Gramians, input-output operators and min-norm controls.

Time integrals over the control grid use the exact L2 product rule for
piecewise-linear nodal data (tridiagonal mass matrix).  For a control ``v``
stored at the nodes, ``L v = sum_jl G_j Q_jl v_l`` with ``G_j = DPhi B`` at node
``j``; the Gramian is ``sum_jl G_j Q_jl G_l^T``.  This keeps ``L L^* = N`` exact
in the discrete setting and makes ``L`` exact whenever ``G`` is itself
piecewise linear (e.g. the double integrator).  The composite trapezoid rule is
kept as an option.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, NonFinite, NotBaselineModel, NotInRange
from .flow import (
    ControlGrid,
    Trajectory,
    flow_jacobian,
    integrate_controlled,
    interval_transitions,
    jacobians_along,
    mass_apply,
    rk4_rows,
    transitions_to_end,
)
from .linalg import jacobi_eigh, spectral_pinv, symmetrize

RULES = ("pl-exact", "trapezoid")


def quadrature_apply(values: np.ndarray, h: float, rule: str = "pl-exact") -> np.ndarray:
    """Apply the quadrature weight operator along the node axis (axis 0)."""
    if rule == "pl-exact":
        return mass_apply(values, h)
    if rule == "trapezoid":
        w = np.full(values.shape[0], h)
        w[0] = w[-1] = 0.5 * h
        return values * w.reshape((-1,) + (1,) * (values.ndim - 1))
    raise ValueError(f"unknown quadrature rule {rule!r}")


def quadrature_matrix(nodes: int, h: float, rule: str = "pl-exact") -> np.ndarray:
    return quadrature_apply(np.eye(nodes), h, rule)


@dataclass(frozen=True, eq=False)
class GramianReport:
    which: int
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    asymmetry: float
    quadrature: dict = field(default_factory=dict)
    rank_tol: float = 1e-12

    @classmethod
    def from_matrix(cls, raw, which, quadrature, rank_tol=1e-12):
        raw = np.asarray(raw, dtype=float)
        if not np.all(np.isfinite(raw)):
            raise NonFinite("Gramian has non-finite entries")
        scale = max(float(np.linalg.norm(raw)), np.finfo(float).tiny)
        asym = float(np.linalg.norm(raw - raw.T)) / scale
        mat = symmetrize(raw)
        w, v = jacobi_eigh(mat)
        return cls(which, mat, w, v, asym, dict(quadrature), rank_tol)

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.eigenvalues > self.rank_tol * max(self.lambda_max, 0.0)))

    @property
    def lambda_star_min(self) -> float | None:
        """Smallest eigenvalue above the rank threshold (None for the zero matrix)."""
        keep = self.eigenvalues[self.eigenvalues > self.rank_tol * max(self.lambda_max, 0.0)]
        return float(keep[0]) if keep.size else None

    @property
    def coercive(self) -> bool:
        return self.lambda_max > 0 and self.lambda_min > self.rank_tol * self.lambda_max

    @property
    def coercive_for(self) -> float | None:
        """Smallest ``C`` with ``lambda_min >= 1/C`` (None if not coercive)."""
        return 1.0 / self.lambda_min if self.coercive else None

    def to_dict(self) -> dict:
        return {
            "which": self.which,
            "matrix": self.matrix.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "lambda_min": self.lambda_min,
            "lambda_star_min": self.lambda_star_min,
            "lambda_max": self.lambda_max,
            "rank": self.rank,
            "coercive_for": self.coercive_for,
            "asymmetry": self.asymmetry,
            "quadrature": self.quadrature,
        }


@dataclass(frozen=True, eq=False)
class OperatorData:
    """Nodal samples defining ``L_{u,tau}`` and its adjoint."""

    which: int
    trajectory: Trajectory
    jacobians: np.ndarray  # (M, d, d)
    inputs: np.ndarray  # (M, d, k)
    t0: float
    T: float
    rule: str = "pl-exact"

    @property
    def kernel(self) -> np.ndarray:
        """``G_j = DPhi_{t_j,tau}(x_u(t_j)) B(t_j, x_u(t_j))``, shape ``(M, d, k)``."""
        return self.jacobians @ self.inputs

    @property
    def M(self) -> int:
        return self.jacobians.shape[0]

    @property
    def h(self) -> float:
        return (self.T - self.t0) / (self.M - 1)

    def matrix(self) -> np.ndarray:
        """``L`` as a ``d x (M k)`` matrix acting on stacked nodal values."""
        g = self.kernel
        q = quadrature_matrix(self.M, self.h, self.rule)
        # (L v)_a = sum_{j,l} G_j[a,c] Q_jl v_l[c]
        return np.einsum("jac,jl->alc", g, q).reshape(g.shape[1], -1)

    def gramian(self) -> np.ndarray:
        g = self.kernel
        return np.einsum("jac,jbc->ab", g, quadrature_apply(g, self.h, self.rule))

    def report(self, rank_tol: float = 1e-12) -> GramianReport:
        return GramianReport.from_matrix(self.gramian(), self.which, {"rule": self.rule, "nodes": self.M}, rank_tol)


def anchor_time(model, which: int) -> float:
    if which == 1:
        return model.t0
    if which == 2:
        return model.T
    raise ValueError("which must be 1 or 2")


def operator_data(model, u: ControlGrid, x0, which: int, step: float, rule: str = "pl-exact") -> OperatorData:
    anchor = anchor_time(model, which)
    traj = integrate_controlled(model, u, x0, step)
    jac = jacobians_along(model, traj, anchor, step).matrices
    b = model.input(traj.nodes, traj.states)
    return OperatorData(which, traj, jac, b, u.t0, u.T, rule)


def assemble_gramian(model, u: ControlGrid, x0, which: int, step: float, rule: str = "pl-exact", rank_tol: float = 1e-12) -> GramianReport:
    """``N_i(u)`` along the controlled trajectory from ``x0``."""
    return operator_data(model, u, x0, which, step, rule).report(rank_tol)


def zero_reference_gramian(model, x0, which: int, step: float, nodes: int = 1001, rule: str = "pl-exact", rank_tol: float = 1e-12) -> GramianReport:
    """``W_i(T) = N_i(0)`` along the uncontrolled flow."""
    u = ControlGrid.zeros(model.t0, model.T, nodes, model.inputs)
    return assemble_gramian(model, u, x0, which, step, rule, rank_tol)


def lyapunov_w2(model, x0, step: float) -> np.ndarray:
    """``W' = B B^T + DN W + W DN^T`` from ``W(t0) = 0`` along the free flow."""
    if model.is_general:
        raise NotBaselineModel("the Lyapunov route to W2 is defined for baseline models")
    d = model.dimension
    x = np.asarray(x0, dtype=float).reshape(1, d)

    def rhs(t, y):
        f, df = model.field_jacobian(t, y[0])
        b = model.input(t, y[0])
        w = y[1]
        return f, b @ np.swapaxes(b, -1, -2) + df @ w + w @ np.swapaxes(df, -1, -2)

    _, w = rk4_rows(rhs, [model.t0], [model.T], (x, np.zeros((1, d, d))), step)
    return symmetrize(w[0])


def congruence_check(model, x0, step: float, nodes: int = 1001) -> float:
    """Relative residual of ``W2 = S W1 S^T`` with ``S = DPhi_{t0,T}(x0)``."""
    w1 = zero_reference_gramian(model, x0, 1, step, nodes).matrix
    w2 = zero_reference_gramian(model, x0, 2, step, nodes).matrix
    s = flow_jacobian(model, model.t0, model.T, x0, step)
    return float(np.linalg.norm(w2 - s @ w1 @ s.T) / max(np.linalg.norm(w2), np.finfo(float).tiny))


def _check_control(data: OperatorData, v: ControlGrid):
    if v.M != data.M or v.k != data.inputs.shape[2] or v.t0 != data.t0 or v.T != data.T:
        raise GridMismatch(
            f"control of shape {v.values.shape} on [{v.t0}, {v.T}] does not match the operator grid "
            f"({data.M} nodes, {data.inputs.shape[2]} inputs on [{data.t0}, {data.T}])"
        )


def apply_L(data: OperatorData, v: ControlGrid) -> np.ndarray:
    _check_control(data, v)
    return np.einsum("jac,jc->a", data.kernel, quadrature_apply(v.values, data.h, data.rule))


def apply_L_adjoint(data: OperatorData, y) -> ControlGrid:
    """Pointwise ``t -> B^T DPhi^T y`` sampled at the nodes."""
    y = np.asarray(y, dtype=float)
    return ControlGrid(data.t0, data.T, np.einsum("jac,a->jc", data.kernel, y))


def min_norm_control(data: OperatorData, y, rank_tol: float = 1e-12, report: GramianReport | None = None) -> ControlGrid:
    """Least-norm solution of ``L v = y`` through the Gramian pseudoinverse."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NonFinite("target must be finite")
    mat = report.matrix if report is not None else symmetrize(data.gramian())
    pinv, _ = spectral_pinv(mat, rank_tol)
    v = apply_L_adjoint(data, pinv @ y)
    res = float(np.linalg.norm(apply_L(data, v) - y))
    if res > 1e-6 * (1.0 + float(np.linalg.norm(y))):
        raise NotInRange(f"target is outside the numerical range of L (residual {res:.3e})", residual=res)
    return v


def hcm_gramian(model, u: ControlGrid, x0, step: float, rule: str = "pl-exact") -> np.ndarray:
    """``M(u) = int R_u(T,t) B B^T R_u(T,t)^T dt`` with the linearized transition ``R_u``."""
    traj = integrate_controlled(model, u, x0, step)
    r = transitions_to_end(interval_transitions(model, u, traj, step))
    g = r @ model.input(traj.nodes, traj.states)
    return symmetrize(np.einsum("jac,jbc->ab", g, quadrature_apply(g, u.spacing, rule)))
