"""Trajectory freezing for ``x' = A(t,x) N_t(x) + B(t,x) u``.

Freezing the state-dependent coefficients along a continuous curve ``z`` gives
the baseline system ``x' = A(t,z(t)) N_t(x) + B(t,z(t)) u``.  Its fixed-point
control ``u_z`` defines the outer map ``Z(z) = x_{u_z}``, iterated (damped) to a
fixed point ``z*``; ``u_{z*}`` then steers the original system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaxOuterIterations, NotGeneralModel, SingularGramian
from .flow import ControlGrid, Trajectory, integrate_controlled
from .model import ModelBounds
from .synthesis import PicardOptions, picard_synthesize, target_displacement


class FrozenModel:
    """Baseline model obtained by evaluating ``A`` and ``B`` along ``z``.

    State-dependent coefficients are sampled at the nodes of ``z`` and
    interpolated linearly in ``t``; coefficients that do not depend on the
    state are evaluated directly, so an identity modulation reproduces the
    underlying baseline model exactly.
    """

    is_general = False
    regime = "baseline"
    modulation = None
    input_state_dependent = False

    def __init__(self, general, z: Trajectory):
        if not general.is_general:
            raise NotGeneralModel("freezing needs a model with a modulation matrix")
        nodes = np.asarray(z.nodes, dtype=float)
        if abs(nodes[0] - general.t0) > 1e-12 or abs(nodes[-1] - general.T) > 1e-12:
            raise ValueError("frozen trajectory must span the model horizon")
        self.general = general
        self.z = z
        self.dimension = general.dimension
        self.inputs = general.inputs
        self.t0 = general.t0
        self.T = general.T
        self.source = general.source
        self._nodes = nodes
        self._h = (self.T - self.t0) / (len(nodes) - 1)
        self._a_nodes = general.modulation_matrix(nodes, z.states) if general.modulation_state_dependent else None
        self._b_nodes = general.input(nodes, z.states) if general.input_state_dependent else None
        a_samples = general.modulation_matrix(nodes, z.states)
        identity = bool(np.all(a_samples == np.eye(self.dimension)))
        self.hopfield = general.hopfield if identity else None
        b = general.bounds
        if b.a_sup is not None:
            a_sup, self.a_sup_sampled = b.a_sup, False
        else:
            a_sup, self.a_sup_sampled = float(np.max(np.linalg.norm(a_samples, ord=2, axis=(1, 2)))), True
        self.a_sup = a_sup
        self.bounds = ModelBounds(
            lambda1=b.lambda1 * a_sup, lambda2=b.lambda2 * a_sup, l_b=0.0, b_sup=b.b_sup, a_sup=a_sup, b_lower=None
        )

    @property
    def delta_t(self) -> float:
        return self.T - self.t0

    def _interp(self, samples, t, xshape):
        t = np.broadcast_to(np.asarray(t, dtype=float), xshape)
        pos = (t - self.t0) / self._h
        j = np.clip(np.floor(pos).astype(int), 0, len(self._nodes) - 2)
        s = (t - self._nodes[j]).reshape(t.shape + (1, 1)) / self._h
        return samples[j] + s * (samples[j + 1] - samples[j])

    def frozen_modulation(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._a_nodes is None:
            return self.general.modulation_matrix(t, x)
        return self._interp(self._a_nodes, t, x.shape[:-1])

    def vector_field(self, t, x):
        a = self.frozen_modulation(t, x)
        return np.einsum("...ij,...j->...i", a, self.general.base_drift(t, x))

    def field_jacobian(self, t, x):
        a = self.frozen_modulation(t, x)
        n, dn = self.general.base_drift_jacobian(t, x)
        return np.einsum("...ij,...j->...i", a, n), np.einsum("...ij,...jl->...il", a, dn)

    def field_second(self, t, x, h, w):
        a = self.frozen_modulation(t, x)
        return np.einsum("...ij,...j->...i", a, self.general.base_drift_second(t, x, h, w))

    def input(self, t, x):
        x = np.asarray(x, dtype=float)
        if self._b_nodes is None:
            return self.general.input(t, x)
        return self._interp(self._b_nodes, t, x.shape[:-1])

    def input_state_jacobian(self, t, x, u):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dimension, self.dimension))

    def b_lower(self, t):
        return None


def frozen_model(general, z: Trajectory) -> FrozenModel:
    return FrozenModel(general, z)


def freeze_step(general, z: Trajectory, x0, x1, options: PicardOptions):
    """``(u_z, x_{u_z})`` for the system frozen along ``z`` (anchor ``T``)."""
    fm = FrozenModel(general, z)
    spec = target_displacement(fm, x0, x1, 2, options.step)
    res = picard_synthesize(fm, spec, options)
    return res.control, res.data.trajectory, res


@dataclass(frozen=True)
class FreezeOptions:
    max_outer: int = 30
    tol_outer: float = 1e-6
    damping: float = 1.0
    fallback_damping: float = 0.5
    patience: int = 10
    picard: PicardOptions = PicardOptions()


@dataclass(frozen=True, eq=False)
class FreezeResult:
    trajectory: Trajectory  # z*
    control: ControlGrid
    history: list
    endpoint: np.ndarray
    endpoint_residual: float
    consistency: float  # sup |x^general_{u} - z*|
    converged: bool
    damping: float
    inner: object = field(default=None, repr=False)

    @property
    def outer_iterations(self) -> int:
        return len(self.history)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "outer_residuals": [float(v) for v in self.history],
            "damping": self.damping,
            "endpoint": self.endpoint.tolist(),
            "endpoint_residual": self.endpoint_residual,
            "consistency": self.consistency,
            "energy": self.control.energy(),
        }


def _sup_diff(a, b) -> float:
    return float(np.max(np.linalg.norm(a - b, axis=1)))


def freeze_iterate(general, x0, x1, options: FreezeOptions = FreezeOptions()) -> FreezeResult:
    """Damped outer iteration ``z <- (1 - a) z + a Z(z)`` from the free trajectory."""
    if not general.is_general:
        raise NotGeneralModel("freezing needs a model with a modulation matrix")
    o = options
    nodes = o.picard.nodes
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    zero = ControlGrid.zeros(general.t0, general.T, nodes, general.inputs)
    z = integrate_controlled(general, zero, x0, o.picard.step)
    constant_map = not (general.modulation_state_dependent or general.input_state_dependent)
    alpha = o.damping
    history: list = []
    stall = 0
    inner = None
    for k in range(o.max_outer):
        try:
            u, xz, inner = freeze_step(general, z, x0, x1, o.picard)
        except SingularGramian as err:
            wrapped = SingularGramian(f"outer iteration {k}: {err}", err.lambda_min, err.lambda_max, iterate=z)
            wrapped.outer_iteration = k
            raise wrapped from err
        if constant_map:
            # Z does not depend on z: its value is the fixed point
            history.append(0.0)
            z = xz
            break
        states = (1.0 - alpha) * z.states + alpha * xz.states
        res = _sup_diff(states, z.states)
        if history and res >= history[-1]:
            stall += 1
        else:
            stall = 0
        history.append(res)
        z = Trajectory(z.nodes, states)
        if res <= o.tol_outer:
            break
        if stall >= o.patience and alpha > o.fallback_damping:
            alpha, stall = o.fallback_damping, 0
    else:
        raise MaxOuterIterations(
            f"outer freezing iteration did not settle in {o.max_outer} steps (last residual {history[-1]:.3e})",
            history=history,
        )
    if not constant_map:
        # control synthesized on the final frozen system
        u, _, inner = freeze_step(general, z, x0, x1, o.picard)
    true = integrate_controlled(general, u, x0, o.picard.step)
    res_end = float(np.linalg.norm(true.final - x1))
    ok = history[-1] <= o.tol_outer and res_end <= o.picard.tol_endpoint * (1.0 + float(np.linalg.norm(x1)))
    return FreezeResult(z, u, history, true.final, res_end, _sup_diff(true.states, z.states), bool(ok), alpha, inner)
