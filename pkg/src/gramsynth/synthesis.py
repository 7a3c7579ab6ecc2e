"""Synthesis maps, Picard iteration, contraction constants and the alignment check.

For anchor ``tau`` the synthesis map is

    S(u)(t) = B(t, x_u(t))^T DPhi_{t,tau}(x_u(t))^T N(u)^{-1} y,

and a fixed point satisfies ``L_{u,tau} u = y``.  For ``tau = T`` that is the
backward representation ``x_u(T) = Phi_{t0,T}(x0) + L_{u,T} u``; for
``tau = t0`` it reads ``Phi_{T,t0}(x_u(T)) = x0 + L_{u,t0} u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MaxIterations, NotConverged, SingularGramian
from .flow import ControlGrid, integrate_controlled, integrate_flow, linear_response, rk4_rows
from .gramian import (
    GramianReport,
    OperatorData,
    anchor_time,
    apply_L,
    apply_L_adjoint,
    min_norm_control,
    operator_data,
    quadrature_apply,
)
from .linalg import spd_solve

SINGULAR_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class TargetSpec:
    x0: np.ndarray
    x1: np.ndarray
    which: int
    y: np.ndarray

    @property
    def y_norm(self) -> float:
        return float(np.linalg.norm(self.y))

    def verify(self, model, step: float, tol: float = 1e-12) -> bool:
        """Recompute ``y`` from ``x0``, ``x1`` and compare with the stored value."""
        again = target_displacement(model, self.x0, self.x1, self.which, step).y
        return bool(np.linalg.norm(again - self.y) <= tol * (1.0 + self.y_norm))


def target_displacement(model, x0, x1, which: int, step: float) -> TargetSpec:
    """``y1 = Phi_{T,t0}(x1) - x0`` or ``y2 = x1 - Phi_{t0,T}(x0)``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    if which == 1:
        y = integrate_flow(model, model.T, model.t0, x1, step) - x0
    elif which == 2:
        y = x1 - integrate_flow(model, model.t0, model.T, x0, step)
    else:
        raise ValueError("which must be 1 or 2")
    return TargetSpec(x0, x1, which, y)


def endpoint(model, u: ControlGrid, x0, step: float) -> np.ndarray:
    return integrate_controlled(model, u, x0, step).final


def represented_endpoint(model, u: ControlGrid, x0, which: int, step: float) -> np.ndarray:
    """Endpoint in anchor coordinates: ``x_u(T)`` or ``Phi_{T,t0}(x_u(T))``."""
    xt = endpoint(model, u, x0, step)
    return xt if which == 2 else integrate_flow(model, model.T, model.t0, xt, step)


# ---------------------------------------------------------------------------
# one step of the synthesis map


def _checked(data: OperatorData, rank_tol: float, iterate=None) -> GramianReport:
    rep = data.report(rank_tol)
    if not rep.lambda_max > 0 or rep.lambda_min <= rank_tol * rep.lambda_max:
        raise SingularGramian(
            f"Gramian left the coercivity class: lambda_min={rep.lambda_min:.3e}, lambda_max={rep.lambda_max:.3e}",
            lambda_min=rep.lambda_min,
            lambda_max=rep.lambda_max,
            iterate=iterate,
        )
    return rep


def synthesis_step(model, spec: TargetSpec, u: ControlGrid, step: float, rank_tol: float = SINGULAR_RTOL) -> ControlGrid:
    """``S_i(u)`` sampled on the grid of ``u``."""
    data = operator_data(model, u, spec.x0, spec.which, step)
    rep = _checked(data, rank_tol)
    return apply_L_adjoint(data, spd_solve(rep.matrix, spec.y))


@dataclass(frozen=True)
class PicardOptions:
    nodes: int = 201
    step: float = 1e-3
    max_iter: int = 100
    tol_fp: float = 1e-10
    tol_endpoint: float = 1e-6
    rank_tol: float = SINGULAR_RTOL
    u_init: ControlGrid | None = None


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    control: ControlGrid
    iterates: list
    endpoint: np.ndarray
    endpoint_residual: float
    energy: float
    energy_identity: float  # y^T N(u)^{-1} y at the returned control
    gramian: GramianReport
    converged: bool
    multiplier: np.ndarray  # N(u)^{-1} y
    which: int = 2
    data: OperatorData | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.iterates)

    @property
    def energy_identity_residual(self) -> float:
        return abs(self.energy - self.energy_identity)

    @property
    def energy_identity_relative(self) -> float:
        return self.energy_identity_residual / max(abs(self.energy_identity), np.finfo(float).tiny)

    def to_dict(self) -> dict:
        return {
            "which": self.which,
            "converged": self.converged,
            "iterations": self.iterations,
            "iterate_deltas": [float(v) for v in self.iterates],
            "endpoint": self.endpoint.tolist(),
            "endpoint_residual": self.endpoint_residual,
            "energy": self.energy,
            "energy_identity": self.energy_identity,
            "energy_identity_residual": self.energy_identity_residual,
            "control_sup_norm": self.control.sup_norm,
            "gramian": self.gramian.to_dict(),
        }


def initial_control(model, spec: TargetSpec, nodes: int, step: float, rank_tol: float = SINGULAR_RTOL) -> ControlGrid:
    """Zero-reference min-norm control (one synthesis step from ``u = 0``)."""
    zero = ControlGrid.zeros(model.t0, model.T, nodes, model.inputs)
    data = operator_data(model, zero, spec.x0, spec.which, step)
    return min_norm_control(data, spec.y, rank_tol, _checked(data, rank_tol, iterate=zero))


def picard_synthesize(model, spec: TargetSpec, options: PicardOptions = PicardOptions()) -> SynthesisResult:
    """Iterate ``u <- S_i(u)`` until the sup-norm update is below ``tol_fp``.

    ``tol_fp`` is relative to ``max(1, ||u||_inf)``; ``tol_endpoint`` to ``1 + |x1|``.
    """
    o = options
    u = o.u_init if o.u_init is not None else initial_control(model, spec, o.nodes, o.step, o.rank_tol)
    deltas = []
    for _ in range(o.max_iter):
        data = operator_data(model, u, spec.x0, spec.which, o.step)
        rep = _checked(data, o.rank_tol, iterate=u)
        lam = spd_solve(rep.matrix, spec.y)
        new = apply_L_adjoint(data, lam)
        delta = float(np.max(np.linalg.norm(new.values - u.values, axis=1)))
        deltas.append(delta)
        u = new
        if delta <= o.tol_fp * max(1.0, u.sup_norm):
            break
    else:
        raise MaxIterations(f"Picard iteration did not settle in {o.max_iter} steps (last delta {deltas[-1]:.3e})", history=deltas)
    return finish(model, spec, u, deltas, o)


def finish(model, spec: TargetSpec, u: ControlGrid, deltas, o: PicardOptions) -> SynthesisResult:
    data = operator_data(model, u, spec.x0, spec.which, o.step)
    rep = _checked(data, o.rank_tol, iterate=u)
    lam = spd_solve(rep.matrix, spec.y)
    xt = data.trajectory.final
    res = float(np.linalg.norm(xt - spec.x1))
    ok = res <= o.tol_endpoint * (1.0 + float(np.linalg.norm(spec.x1)))
    return SynthesisResult(
        control=u,
        iterates=list(deltas),
        endpoint=xt,
        endpoint_residual=res,
        energy=u.energy(),
        energy_identity=float(spec.y @ lam),
        gramian=rep,
        converged=bool(ok),
        multiplier=lam,
        which=spec.which,
        data=data,
    )


# ---------------------------------------------------------------------------
# contraction constants


def _exp_ratio(lam: float, s: float) -> float:
    """``(e^{2 lam s} - e^{lam s}) / lam`` with its limit ``s`` at ``lam = 0``."""
    if lam == 0.0:
        return s
    return math.exp(lam * s) * math.expm1(lam * s) / lam


@dataclass(frozen=True)
class ContractionEstimate:
    E0: float
    E1: float
    E2: float
    alpha1: float
    alpha2: float
    K: float
    delta_t: float

    def rho(self, m: int) -> float:
        """Lipschitz constant ``K^m / m!`` of the ``m``-th iterate."""
        return self.K**m / math.factorial(m)

    def to_dict(self) -> dict:
        return {"E0": self.E0, "E1": self.E1, "E2": self.E2, "alpha1": self.alpha1, "alpha2": self.alpha2, "K": self.K}


def contraction_constant(model, y_norm: float, zeta: float, C: float) -> ContractionEstimate:
    """Volterra constants of the synthesis map on its feasibility ball.

    ``zeta`` bounds ``||u||_inf`` on the ball and ``C`` the inverse Gramian
    (``C = (1 + theta) / lambda_min`` of the reference).  The same expressions
    serve both anchors.
    """
    b = model.bounds
    dt = model.delta_t
    lam1, lam2, lb, bs = b.lambda1, b.lambda2, b.l_b, b.b_sup
    e0 = math.exp(lb * zeta * dt)
    e1 = math.exp(lam1 * dt)
    e2 = math.exp(2 * lam1 * dt) - e1
    inner = lam2 * bs * _exp_ratio(lam1, dt) + lb * e1
    a1 = 2 * e0 * C**2 * bs**3 * e1**2 * inner * y_norm
    a2 = e0 * C * bs * e1 * inner * y_norm
    return ContractionEstimate(e0, e1, e2, a1, a2, dt * (a1 * dt + a2), dt)


# ---------------------------------------------------------------------------
# a posteriori alignment


@dataclass(frozen=True)
class AlignmentReport:
    kernel_dimension: int
    directions: int
    kernel_norm: float  # max |K h| over the kernel basis
    orthogonality_residual: float
    tolerance: float
    a_norm: float

    @property
    def verdict(self) -> str:
        ok = self.kernel_norm <= self.tolerance and self.orthogonality_residual <= self.tolerance
        return "pass" if ok else "fail"

    def to_dict(self) -> dict:
        return {
            "kernel_dimension": self.kernel_dimension,
            "directions": self.directions,
            "kernel_norm": self.kernel_norm,
            "orthogonality_residual": self.orthogonality_residual,
            "a_norm": self.a_norm,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
        }


def represented_map(model, u: ControlGrid, spec: TargetSpec, step: float) -> np.ndarray:
    """``G(u) = L_{u,tau} u - y`` on the grid."""
    data = operator_data(model, u, spec.x0, spec.which, step)
    return apply_L(data, u) - spec.y


def _directional(model, u, spec, h_vals, eps, step):
    up = u.with_values(u.values + eps * h_vals)
    um = u.with_values(u.values - eps * h_vals)
    return (represented_map(model, up, spec, step) - represented_map(model, um, spec, step)) / (2 * eps)


def alignment_check(
    model,
    spec: TargetSpec,
    result: SynthesisResult,
    step: float,
    fd_step: float | None = None,
    tol: float | None = None,
    max_directions: int | None = None,
    seed: int = 0,
) -> AlignmentReport:
    """Check ``K(ker L) = {0}`` and the orthogonality condition at a fixed point.

    ``K = DG - L`` with ``DG`` from central differences of the discrete
    representation ``G``.  ``max_directions`` caps the number of kernel
    directions probed (random orthonormal combinations of the kernel basis).
    """
    if not result.converged:
        raise NotConverged("alignment needs a converged synthesis")
    u = result.control
    data = result.data if result.data is not None else operator_data(model, u, spec.x0, spec.which, step)
    fd_step = 1e-5 * (1.0 + u.sup_norm) if fd_step is None else fd_step
    tol = 1e-5 * (1.0 + spec.y_norm) if tol is None else tol
    Lmat = data.matrix()
    _, sv, vt = np.linalg.svd(Lmat)
    rank = int(np.count_nonzero(sv > 1e-12 * sv[0])) if sv.size and sv[0] > 0 else 0
    basis = vt[rank:].T  # (M k, n_ker)
    if max_directions is not None and basis.shape[1] > max_directions:
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((basis.shape[1], max_directions)))
        basis = basis @ q
    shape = u.values.shape
    k_cols = []
    for c in range(basis.shape[1]):
        h = basis[:, c].reshape(shape)
        dg = _directional(model, u, spec, h, fd_step, step)
        k_cols.append(dg - Lmat @ basis[:, c])
    kp = np.array(k_cols).T if k_cols else np.zeros((data.jacobians.shape[1], 0))
    kernel_norm = float(np.max(np.linalg.norm(kp, axis=0))) if k_cols else 0.0
    # A = K R with R = L^* N^{-1}
    d = data.jacobians.shape[1]
    nmat = result.gramian.matrix
    a = np.empty((d, d))
    for e in range(d):
        r_col = apply_L_adjoint(data, spd_solve(nmat, np.eye(d)[e])).values
        a[:, e] = _directional(model, u, spec, r_col, fd_step, step) - Lmat @ r_col.ravel()
    lam = result.multiplier
    if k_cols:
        w = np.linalg.solve(np.eye(d) + a, kp)
        orth = float(np.max(np.abs(lam @ w)))
    else:
        orth = 0.0
    return AlignmentReport(int(Lmat.shape[1] - rank), basis.shape[1], kernel_norm, orth, tol, float(np.linalg.norm(a, 2)))


# ---------------------------------------------------------------------------
# operator-splitting construction of the endpoint derivative


def second_variation_along(model, nodes, states, a, b, anchor: float, step: float) -> np.ndarray:
    """``D^2 Phi_{t_j,anchor}(x_j)[a_j, b_j]`` for every row ``j``."""
    nodes = np.asarray(nodes, dtype=float)

    def rhs(t, y):
        x, p, q, r = y
        f, df = model.field_jacobian(t, x)
        mv = lambda m, v: np.einsum("...ij,...j->...i", m, v)  # noqa: E731
        return f, mv(df, p), mv(df, q), mv(df, r) + model.field_second(t, x, p, q)

    y0 = (states, np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.zeros_like(states))
    out = rk4_rows(rhs, nodes, np.full_like(nodes, anchor), y0, step)
    return out[3]


def split_derivative(model, u: ControlGrid, spec: TargetSpec, h: ControlGrid, step: float) -> np.ndarray:
    """``L h + J_u W_u H_u h``: the linearized-equation route to ``DE(u)[h]``."""
    data = operator_data(model, u, spec.x0, spec.which, step)
    dx = linear_response(model, u, spec.x0, h, step)
    traj = data.trajectory
    bu = np.einsum("jik,jk->ji", data.inputs, u.values)
    r = second_variation_along(model, traj.nodes, traj.states, dx, bu, anchor_time(model, spec.which), step)
    db = model.input_state_jacobian(traj.nodes, traj.states, u.values)
    r = r + np.einsum("jab,jb->ja", data.jacobians, np.einsum("jab,jb->ja", db, dx))
    return apply_L(data, h) + np.sum(quadrature_apply(r, data.h, data.rule), axis=0)


def fd_endpoint_derivative(model, u: ControlGrid, spec: TargetSpec, h: ControlGrid, step: float, eps: float) -> np.ndarray:
    """Central difference of the integrated endpoint map (anchor coordinates)."""
    up = u.with_values(u.values + eps * h.values)
    um = u.with_values(u.values - eps * h.values)
    e = lambda v: represented_endpoint(model, v, spec.x0, spec.which, step)  # noqa: E731
    return (e(up) - e(um)) / (2 * eps)


@dataclass(frozen=True)
class SplitCheck:
    relative_error: float
    finite_difference: np.ndarray
    construction: np.ndarray


def operator_splitting_check(model, u: ControlGrid, spec: TargetSpec, h: ControlGrid, step: float, eps: float | None = None) -> SplitCheck:
    eps = 1e-5 * (1.0 + u.sup_norm) / max(h.sup_norm, 1e-300) if eps is None else eps
    fd = fd_endpoint_derivative(model, u, spec, h, step, eps)
    sd = split_derivative(model, u, spec, h, step)
    rel = float(np.linalg.norm(fd - sd) / max(np.linalg.norm(fd), np.finfo(float).tiny))
    return SplitCheck(rel, fd, sd)
