"""Trajectories, flows and their Jacobians by classical fixed-step RK4.

Two integration patterns are used throughout:

* *per-node flows* (``integrate_flow``, ``flow_jacobian``, ``jacobians_along``):
  every row of a batch integrates its own uncontrolled flow from ``t_a`` to
  ``t_b`` with ``n = ceil(|t_b - t_a| / step)`` uniform substeps.  Rows with
  fewer substeps are frozen once done (masked lockstep), so a batched call gives
  the same numbers as one call per row.
* *controlled runs* (``integrate_controlled`` and friends): the integration
  walks the control grid interval by interval with ``ceil(dt / step)`` substeps
  per interval, and the control is linearly interpolated at every stage time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, GridMismatch, NonFinite


# ---------------------------------------------------------------------------
# signals


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Piecewise-linear control on ``M`` uniform nodes ``t_j = t0 + j (T - t0) / (M - 1)``."""

    t0: float
    T: float
    values: np.ndarray  # (M, k)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2:
            raise GridMismatch("a control grid needs at least two nodes")
        if not self.T > self.t0:
            raise GridMismatch("control grid needs T > t0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, t0, T, nodes, inputs=1):
        return cls(t0, T, np.zeros((nodes, inputs)))

    @classmethod
    def constant(cls, t0, T, nodes, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(t0, T, np.tile(value, (nodes, 1)))

    @classmethod
    def from_function(cls, t0, T, nodes, fn):
        t = node_times(t0, T, nodes)
        return cls(t0, T, np.array([np.atleast_1d(fn(s)) for s in t], dtype=float))

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def spacing(self) -> float:
        return (self.T - self.t0) / (self.M - 1)

    @property
    def nodes(self) -> np.ndarray:
        return node_times(self.t0, self.T, self.M)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.nodes, self.values[:, c]) for c in range(self.k)], axis=-1)
        return out

    def energy(self) -> float:
        """``int |u(t)|^2 dt``, exact for the piecewise-linear interpolant."""
        return float(np.sum(self.values * mass_apply(self.values, self.spacing)))

    def inner(self, other: "ControlGrid") -> float:
        self.check_compatible(other)
        return float(np.sum(self.values * mass_apply(other.values, self.spacing)))

    def l2_distance(self, other: "ControlGrid") -> float:
        self.check_compatible(other)
        return math.sqrt(max(ControlGrid(self.t0, self.T, self.values - other.values).energy(), 0.0))

    def check_compatible(self, other: "ControlGrid"):
        if other.values.shape != self.values.shape or other.t0 != self.t0 or other.T != self.T:
            raise GridMismatch(
                f"control grids differ: {self.values.shape} on [{self.t0}, {self.T}] vs "
                f"{other.values.shape} on [{other.t0}, {other.T}]"
            )

    def with_values(self, values) -> "ControlGrid":
        return ControlGrid(self.t0, self.T, values)


def node_times(t0: float, T: float, nodes: int) -> np.ndarray:
    j = np.arange(nodes, dtype=float)
    t = t0 + j * (T - t0) / (nodes - 1)
    t[-1] = T
    return t


def mass_apply(values: np.ndarray, h: float) -> np.ndarray:
    """Multiply nodal values by the mass matrix of the piecewise-linear hat basis.

    ``(M v)_j = h/6 (v_{j-1} + 4 v_j + v_{j+1})`` inside, ``h/6 (2 v_0 + v_1)`` at the ends,
    so ``<u, M v>`` is the exact L2 inner product of the interpolants.
    """
    v = np.asarray(values, dtype=float)
    out = 4.0 * v
    out[1:] += v[:-1]
    out[:-1] += v[1:]
    out[0] -= 2.0 * v[0]
    out[-1] -= 2.0 * v[-1]
    return out * (h / 6.0)


def mass_matrix(nodes: int, h: float) -> np.ndarray:
    return mass_apply(np.eye(nodes), h)


@dataclass(frozen=True, eq=False)
class Trajectory:
    nodes: np.ndarray  # (M,)
    states: np.ndarray  # (M, d)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.states, axis=1)))


@dataclass(frozen=True, eq=False)
class FlowJacobianSet:
    anchor: float
    nodes: np.ndarray
    matrices: np.ndarray  # (M, d, d); matrices[j] = DPhi_{t_j, anchor}(x(t_j))


# ---------------------------------------------------------------------------
# RK4 kernels

State = tuple


def _axpy(y: State, a, k: State) -> State:
    return tuple(yi + _bc(a, yi) * ki for yi, ki in zip(y, k))


def _bc(a, like):
    a = np.asarray(a, dtype=float)
    return a.reshape(a.shape + (1,) * (like.ndim - a.ndim)) if a.ndim else a


def _rk4_step(rhs, t, h, y: State) -> State:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, _axpy(y, 0.5 * h, k1))
    k3 = rhs(t + 0.5 * h, _axpy(y, 0.5 * h, k2))
    k4 = rhs(t + h, _axpy(y, h, k3))
    return tuple(
        yi + _bc(h / 6.0, yi) * (a + 2.0 * b + 2.0 * c + e) for yi, a, b, c, e in zip(y, k1, k2, k3, k4)
    )


def substeps(span, step: float):
    """Uniform substep count with substep size <= ``step`` (0 for an empty span)."""
    if step <= 0:
        raise ValueError("integrator step must be positive")
    span = np.abs(np.asarray(span, dtype=float))
    n = np.ceil(span / step * (1.0 - 1e-12)).astype(int)
    return np.where(span > 0, np.maximum(n, 1), 0)


def _check(y: State):
    for a in y:
        if not np.all(np.isfinite(a)):
            raise NonFinite("integration produced non-finite values")


def rk4_rows(rhs, t_a, t_b, y0: State, step: float) -> State:
    """Integrate each batch row from ``t_a[r]`` to ``t_b[r]`` (masked lockstep)."""
    t_a = np.asarray(t_a, dtype=float)
    t_b = np.asarray(t_b, dtype=float)
    n = substeps(t_b - t_a, step)
    nmax = int(n.max()) if n.size else 0
    h = np.where(n > 0, (t_b - t_a) / np.maximum(n, 1), 0.0)
    y = tuple(np.array(a, dtype=float) for a in y0)
    for m in range(nmax):
        active = m < n
        if active.all():
            y = _rk4_step(rhs, t_a + m * h, h, y)
            continue
        # finished rows are frozen; only the active ones are stepped
        idx = np.nonzero(active)[0]
        sub = _rk4_step(rhs, t_a[idx] + m * h[idx], h[idx], tuple(a[idx] for a in y))
        for a, b in zip(y, sub):
            a[idx] = b
    _check(y)
    return y


def rk4_interval(rhs, t_a, t_b, y0: State, u_a, u_b, nsub: int) -> State:
    """Integrate rows over one control interval with linear control interpolation.

    ``rhs(t, y, u)``; ``u_a``, ``u_b`` are the control values at ``t_a``, ``t_b``.
    """
    t_a = np.asarray(t_a, dtype=float)
    span = np.asarray(t_b, dtype=float) - t_a
    h = span / nsub
    du = np.asarray(u_b, dtype=float) - np.asarray(u_a, dtype=float)
    u_a = np.asarray(u_a, dtype=float)

    def f(t, y):
        s = (t - t_a) / span
        return rhs(t, y, u_a + _bc(s, du) * du)

    y = y0
    for m in range(nsub):
        y = _rk4_step(f, t_a + m * h, h, y)
    return y


# ---------------------------------------------------------------------------
# uncontrolled flows


def _in_horizon(model, *times):
    eps = 1e-12 * max(1.0, abs(model.T), abs(model.t0))
    for t in times:
        t = np.asarray(t)
        if np.any(t < model.t0 - eps) or np.any(t > model.T + eps):
            raise ValueError(f"time outside the model horizon [{model.t0}, {model.T}]")


def _flow_rhs(model):
    return lambda t, y: (model.vector_field(t, y[0]),)


def _variational_rhs(model):
    def rhs(t, y):
        f, df = model.field_jacobian(t, y[0])
        return f, df @ y[1]

    return rhs


def integrate_flow(model, t_a: float, t_b: float, x_a, step: float) -> np.ndarray:
    """``Phi_{t_a, t_b}(x_a)``; ``t_b < t_a`` integrates backward."""
    _in_horizon(model, t_a, t_b)
    x = np.asarray(x_a, dtype=float).reshape(1, -1)
    (out,) = rk4_rows(_flow_rhs(model), [t_a], [t_b], (x,), step)
    return out[0]


def flow_jacobian(model, t_a: float, t_b: float, x_a, step: float) -> np.ndarray:
    """``DPhi_{t_a, t_b}(x_a)`` from the augmented state + variational system."""
    _in_horizon(model, t_a, t_b)
    x = np.asarray(x_a, dtype=float).reshape(1, -1)
    eye = np.eye(x.shape[1])[None]
    _, jac = rk4_rows(_variational_rhs(model), [t_a], [t_b], (x, eye), step)
    return jac[0]


def flow_jacobian_rows(model, t_a, t_b, x_a, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``(Phi, DPhi)`` for rows ``(t_a[r], t_b[r], x_a[r])``."""
    x = np.asarray(x_a, dtype=float)
    eye = np.broadcast_to(np.eye(x.shape[1]), (x.shape[0],) + (x.shape[1],) * 2)
    return rk4_rows(_variational_rhs(model), t_a, t_b, (x, eye), step)


def jacobians_along(model, traj: Trajectory, anchor: float, step: float) -> FlowJacobianSet:
    """``DPhi_{t_j, anchor}(x(t_j))`` for every node of ``traj`` (one flow per node)."""
    if not (anchor == model.t0 or anchor == model.T):
        raise ValueError("anchor must be t0 or T")
    nodes = np.asarray(traj.nodes, dtype=float)
    _, jac = flow_jacobian_rows(model, nodes, np.full_like(nodes, anchor), traj.states, step)
    return FlowJacobianSet(float(anchor), nodes, jac)


# ---------------------------------------------------------------------------
# controlled runs


def _controlled_rhs(model):
    def rhs(t, y, u):
        x = y[0]
        return (model.vector_field(t, x) + np.einsum("...ik,...k->...i", model.input(t, x), u),)

    return rhs


def _linearized_rhs(model):
    def rhs(t, y, u):
        x, Y = y
        f, df = model.field_jacobian(t, x)
        b = model.input(t, x)
        coef = df + model.input_state_jacobian(t, x, u)
        return f + np.einsum("...ik,...k->...i", b, u), coef @ Y

    return rhs


def _response_rhs(model, k):
    # control slot carries [u, h]: state x driven by u, perturbation dx driven by h
    def rhs(t, y, uh):
        x, dx = y
        u, h = uh[..., :k], uh[..., k:]
        f, df = model.field_jacobian(t, x)
        b = model.input(t, x)
        coef = df + model.input_state_jacobian(t, x, u)
        return (
            f + np.einsum("...ik,...k->...i", b, u),
            np.einsum("...ij,...j->...i", coef, dx) + np.einsum("...ik,...k->...i", b, h),
        )

    return rhs


def _check_grid(model, u: ControlGrid):
    if u.k != model.inputs:
        raise GridMismatch(f"control has {u.k} inputs, model expects {model.inputs}")
    if abs(u.t0 - model.t0) > 1e-12 or abs(u.T - model.T) > 1e-12:
        raise GridMismatch(f"control horizon [{u.t0}, {u.T}] differs from model [{model.t0}, {model.T}]")


def _walk_grid(rhs, u: ControlGrid, y0: State, step: float, record: Callable | None = None) -> State:
    nodes = u.nodes
    nsub = int(substeps(u.spacing, step))
    y = tuple(np.asarray(a, dtype=float)[None] for a in y0)
    if record is not None:
        record(0, y)
    vals = u.values
    for j in range(u.M - 1):
        y = rk4_interval(rhs, nodes[j], nodes[j + 1], y, vals[j][None], vals[j + 1][None], nsub)
        if record is not None:
            record(j + 1, y)
    _check(y)
    return tuple(a[0] for a in y)


def integrate_controlled(model, u: ControlGrid, x0, step: float) -> Trajectory:
    """Solve ``x' = f(t,x) + B(t,x) u(t)`` from ``x0``, sampled at the control nodes."""
    _check_grid(model, u)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    states = np.empty((u.M, model.dimension))

    def rec(j, y):
        states[j] = y[0][0]

    _walk_grid(_controlled_rhs(model), u, (x0,), step, rec)
    if not np.all(np.isfinite(states)):
        raise NonFinite("controlled trajectory blew up")
    return Trajectory(u.nodes, states)


def interval_transitions(model, u: ControlGrid, traj: Trajectory, step: float) -> np.ndarray:
    """``R_u(t_{j+1}, t_j)`` for every control interval, shape ``(M-1, d, d)``."""
    _check_grid(model, u)
    nodes = u.nodes
    d = model.dimension
    nsub = int(substeps(u.spacing, step))
    eye = np.broadcast_to(np.eye(d), (u.M - 1, d, d))
    y = rk4_interval(
        _linearized_rhs(model), nodes[:-1], nodes[1:], (traj.states[:-1], eye), u.values[:-1], u.values[1:], nsub
    )
    _check(y)
    return y[1]


def linearized_transition(model, u: ControlGrid, traj: Trajectory, t_from: float, t_to: float, step: float) -> np.ndarray:
    """State-transition matrix of ``y' = (Df(t,x_u) + D_xB(t,x_u)[u, .]) y`` from ``t_from`` to ``t_to``."""
    _check_grid(model, u)
    _in_horizon(model, t_from, t_to)
    d = model.dimension
    if t_from == t_to:
        return np.eye(d)
    nodes = u.nodes
    # state at t_from: start from the node at or before it
    j0 = int(np.clip(np.searchsorted(nodes, t_from, side="right") - 1, 0, u.M - 2))
    x = traj.states[j0]
    rhs = _controlled_rhs(model)
    if t_from > nodes[j0]:
        (x,) = _walk_pieces(rhs, u, nodes[j0], t_from, (x,), step)
    _, R = _walk_pieces(_linearized_rhs(model), u, t_from, t_to, (x, np.eye(d)), step)
    return R


def _walk_pieces(rhs, u: ControlGrid, t_a: float, t_b: float, y0: State, step: float) -> State:
    """Controlled integration between arbitrary times, split at control nodes."""
    nodes = u.nodes
    lo, hi = min(t_a, t_b), max(t_a, t_b)
    inner = [t for t in nodes if lo < t < hi]
    pts = [lo] + inner + [hi]
    pieces = list(zip(pts[:-1], pts[1:]))
    if t_b < t_a:
        pieces = [(q, p) for p, q in reversed(pieces)]
    y = tuple(np.asarray(a, dtype=float)[None] for a in y0)
    for p, q in pieces:
        n = int(substeps(q - p, step))
        if n == 0:
            continue
        y = rk4_interval(rhs, p, q, y, u(p)[None], u(q)[None], n)
    _check(y)
    return tuple(a[0] for a in y)


def transitions_to_end(steps: np.ndarray) -> np.ndarray:
    """``R(T, t_j)`` from one-interval transitions ``R(t_{j+1}, t_j)``."""
    m = steps.shape[0] + 1
    d = steps.shape[1]
    out = np.empty((m, d, d))
    out[-1] = np.eye(d)
    for j in range(m - 2, -1, -1):
        out[j] = out[j + 1] @ steps[j]
    return out


def linear_response(model, u: ControlGrid, x0, h: ControlGrid, step: float) -> np.ndarray:
    """Nodal samples of ``dx(t) = int_{t0}^t R_u(t, s) B(s, x_u(s)) h(s) ds``.

    Obtained by integrating the linearized equation with input ``B h`` jointly
    with the state; this is the first-order response of ``x_u`` to ``u + eps h``.
    """
    _check_grid(model, u)
    u.check_compatible(h)
    d = model.dimension
    both = ControlGrid(u.t0, u.T, np.hstack([u.values, h.values]))
    out = np.empty((u.M, d))

    def rec(j, y):
        out[j] = y[1][0]

    _walk_grid(_response_rhs(model, u.k), both, (np.asarray(x0, dtype=float), np.zeros(d)), step, rec)
    return out


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_signal_csv(path, nodes, values, prefix: str):
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{prefix}{i + 1}" for i in range(values.shape[1])])
        for t, row in zip(nodes, values):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])


def write_trajectory_csv(path, traj: Trajectory):
    write_signal_csv(path, traj.nodes, traj.states, "x")


def write_control_csv(path, u: ControlGrid):
    write_signal_csv(path, u.nodes, u.values, "u")


def read_control_csv(path, t0: float | None = None, T: float | None = None, nodes: int | None = None) -> ControlGrid:
    """Read a control written by :func:`write_control_csv`.

    When ``t0``, ``T``, ``nodes`` are given the file must sit on exactly that grid.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise ConfigError(f"cannot read control file {path}: {err}") from err
    if not rows:
        raise ConfigError(f"{path}: empty control file")
    header = [h.strip() for h in rows[0]]
    k = len(header) - 1
    if k < 1 or header[0] != "t" or header[1:] != [f"u{i + 1}" for i in range(k)]:
        raise ConfigError(f"{path}: row 1: header must be t,u1..uk, got {','.join(header)}")
    data = []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != k + 1:
            raise ConfigError(f"{path}: row {i}: expected {k + 1} fields, got {len(r)}")
        try:
            data.append([float(v) for v in r])
        except ValueError as err:
            raise ConfigError(f"{path}: row {i}: {err}") from err
    arr = np.array(data, dtype=float)
    if arr.shape[0] < 2:
        raise ConfigError(f"{path}: need at least two rows of data")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}: non-finite values")
    grid = ControlGrid(float(arr[0, 0]), float(arr[-1, 0]), arr[:, 1:])
    if nodes is not None and grid.M != nodes:
        raise ConfigError(f"{path}: control has {grid.M} rows, grid expects {nodes}")
    if t0 is not None and T is not None:
        expect = node_times(t0, T, grid.M)
        bad = np.nonzero(np.abs(arr[:, 0] - expect) > 1e-9 * max(1.0, abs(T)))[0]
        if bad.size:
            raise ConfigError(f"{path}: row {int(bad[0]) + 2}: time {arr[bad[0], 0]} is off the control grid")
        grid = ControlGrid(t0, T, arr[:, 1:])
    return grid
