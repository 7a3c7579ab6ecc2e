"""Lipschitz constants of the Gramian map, admissible radii and reference search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import EmptyAdmissibleSet, SingularGramian, UndefinedBound
from .flow import ControlGrid
from .gramian import operator_data
from .model import hopfield_rates
from .synthesis import target_displacement


def dexp(a: float, b: float, dt: float) -> float:
    """``(e^{a dt} - e^{b dt}) / (a - b)``, with limit ``dt e^{a dt}`` at ``a = b``."""
    if a == b:
        return dt * math.exp(a * dt)
    return math.exp(b * dt) * math.expm1((a - b) * dt) / (a - b)


def _growth(rate: float, dt: float) -> float:
    """``(e^{rate dt} - 1) / rate`` with limit ``dt``."""
    return dt if rate == 0.0 else math.expm1(rate * dt) / rate


def lipschitz_state_independent(lam1, lam2, b_sup, dt, which) -> float:
    g = _growth(lam1, dt)
    if which == 1:
        return lam2 * b_sup**3 / 6.0 * (3.0 * math.exp(lam1 * dt) + 1.0) * g**3
    return lam2 * b_sup**3 / 3.0 * g**3


def lipschitz_general(lam1, lam2, l_b, b_sup, dt, zeta, which) -> float:
    if lam1 == 0.0:
        raise UndefinedBound("the state-dependent-input Lipschitz bound divides by lambda1 = 0")
    lam, c = lam1, l_b * zeta
    e = math.exp(lam * dt)
    second_pre = 2.0 * b_sup**3 * lam2 * e / (lam * (lam + c))
    tail = dexp(lam, -lam, dt) - dexp(2 * lam, -lam, dt)
    if which == 1:
        first = l_b * b_sup**2 * e / lam * (dexp(2 * lam + c, lam, dt) + dexp(2 * lam + c, -lam, dt))
        second = dexp(3 * lam + c, -lam, dt) - dexp(2 * lam + c, -lam, dt) + tail
    else:
        first = l_b * b_sup**2 * e / lam * (dexp(lam, c, dt) - dexp(c, -lam, dt))
        second = dexp(2 * lam, c, dt) + dexp(lam, c, dt) + tail
    return first + second_pre * second


def generic_lipschitz(model, zeta: float, which: int) -> float:
    """Lipschitz constant of ``u -> N_i(u)`` on ``{||u||_inf <= zeta}``.

    With ``L_B = 0`` the state-independent closed form is used (valid on all of
    ``L^inf``); otherwise the general expression, with removable singularities
    evaluated as limits.
    """
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    b = model.bounds
    if b.l_b == 0.0:
        return lipschitz_state_independent(b.lambda1, b.lambda2, b.b_sup, model.delta_t, which)
    return lipschitz_general(b.lambda1, b.lambda2, b.l_b, b.b_sup, model.delta_t, zeta, which)


def hopfield_lipschitz(params, model, which: int) -> float:
    r = hopfield_rates(params)
    bs, dt = model.bounds.b_sup, model.delta_t
    if which == 1:
        return r.gamma2 * bs**3 / 6.0 * (3.0 * math.exp(r.gamma1 * dt) + 1.0) * _growth(r.gamma1, dt) ** 3
    return r.gamma2 * bs**3 / 3.0 * _growth(r.gamma, dt) ** 3


# ---------------------------------------------------------------------------
# fully actuated coercivity


@dataclass(frozen=True)
class CoercivityResult:
    C: float | None
    b_l1: float | None
    reason: str = ""
    failing_probe: dict | None = None


def uniform_coercivity(model, probes: int = 256, box: float = 2.0, seed: int = 0) -> CoercivityResult:
    """``C = dt e^{2 lambda1 dt} / ||b||_1^2`` when ``|B^T y| >= b(t)|y|`` passes sampling."""
    if model.dimension != model.inputs:
        return CoercivityResult(None, None, "underactuated: d != k")
    if model.b_lower(model.t0) is None:
        return CoercivityResult(None, None, "no lower profile b(t) declared")
    rng = np.random.default_rng(seed)
    d = model.dimension
    t = rng.uniform(model.t0, model.T, probes)
    x = rng.uniform(-box, box, (probes, d))
    y = rng.standard_normal((probes, d))
    bt = model.input(t, x)
    lhs = np.linalg.norm(np.einsum("pik,pi->pk", bt, y), axis=1)
    rhs = model.b_lower(t) * np.linalg.norm(y, axis=1)
    bad = np.nonzero(lhs < rhs * (1.0 - 1e-12))[0]
    if bad.size:
        p = int(bad[0])
        return CoercivityResult(None, None, "lower profile violated", {"t": float(t[p]), "x": x[p].tolist(), "y": y[p].tolist()})
    b_l1, _ = integrate.quad(lambda s: abs(float(model.b_lower(s))), model.t0, model.T, limit=200)
    if b_l1 <= 0:
        return CoercivityResult(None, b_l1, "lower profile integrates to zero")
    dt = model.delta_t
    return CoercivityResult(dt * math.exp(2 * model.bounds.lambda1 * dt) / b_l1**2, b_l1)


# ---------------------------------------------------------------------------
# admissible radius


def radius_formula(lam_min, theta, b_sup, lam1, dt, lipschitz, ref_sup) -> float:
    """``lam/((1+th) |B| e^{L1 dt}) * (th lam/((1+th) L) - ||u_ref||)``; +inf for ``L = 0``."""
    if lipschitz == 0.0:
        return math.inf
    return lam_min / ((1 + theta) * b_sup * math.exp(lam1 * dt)) * (theta * lam_min / ((1 + theta) * lipschitz) - ref_sup)


@dataclass(frozen=True, eq=False)
class Certificate:
    which: int
    theta: float
    lipschitz: float
    lipschitz_source: str
    zeta: float | None
    reference: ControlGrid = field(repr=False)
    lambda_min_ref: float
    radius: float
    target_norm: float | None
    admissible: bool | None
    energy_bound: float | None = None
    reason: str = ""
    constants: dict = field(default_factory=dict)

    @property
    def C(self) -> float:
        return (1 + self.theta) / self.lambda_min_ref

    def to_dict(self) -> dict:
        fin = lambda v: v if v is None or math.isfinite(v) else "inf"  # noqa: E731
        return {
            "which": self.which,
            "theta": self.theta,
            "lipschitz": self.lipschitz,
            "lipschitz_source": self.lipschitz_source,
            "zeta": fin(self.zeta),
            "reference_sup_norm": self.reference.sup_norm,
            "lambda_min_ref": self.lambda_min_ref,
            "C": self.C,
            "radius": fin(self.radius),
            "target_norm": self.target_norm,
            "admissible": self.admissible,
            "energy_bound": self.energy_bound,
            "reason": self.reason,
            "constants": self.constants,
        }


def _lipschitz_fn(model, which):
    if model.hopfield is not None:
        val = hopfield_lipschitz(model.hopfield, model, which)
        return (lambda zeta: val), "hopfield"
    if model.bounds.l_b == 0.0:
        val = generic_lipschitz(model, 0.0, which)
        return (lambda zeta: val), "state-independent"
    return (lambda zeta: generic_lipschitz(model, zeta, which)), "state-dependent"


def _certify(model, u_ref: ControlGrid, lam_min: float, which: int, theta: float, y_norm: float | None) -> Certificate:
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    b = model.bounds
    dt = model.delta_t
    lip_of, source = _lipschitz_fn(model, which)
    C = (1 + theta) / lam_min
    growth = b.b_sup * math.exp(b.lambda1 * dt)
    ref_sup = u_ref.sup_norm

    def radius_at(zeta):
        return radius_formula(lam_min, theta, b.b_sup, b.lambda1, dt, lip_of(zeta), ref_sup)

    constants = {"lambda1": b.lambda1, "lambda2": b.lambda2, "l_b": b.l_b, "b_sup": b.b_sup, "delta_t": dt, "C": C}
    reason = ""
    if y_norm is not None:
        zeta = C * growth * y_norm
        lip = lip_of(zeta)
        radius = radius_at(zeta)
    else:
        zeta, radius, reason = _self_consistent(radius_at, C * growth)
        lip = lip_of(zeta if zeta is not None else 0.0)
    if lip > 0 and ref_sup >= theta * lam_min / ((1 + theta) * lip):
        radius, reason = 0.0, "reference control violates the sup-norm hypothesis"
    radius = max(radius, 0.0) if not math.isnan(radius) else 0.0
    admissible = None if y_norm is None else bool(y_norm <= radius and (radius > 0 or y_norm == 0))
    return Certificate(which, theta, lip, source, zeta, u_ref, lam_min, radius, y_norm, admissible, None, reason, constants)


def _self_consistent(radius_at, zeta_per_radius, iters: int = 64):
    """Self-consistent ``r = radius(zeta(r))`` by bracketing and bisection.

    The bracket starts at ``radius(0)`` and is doubled while ``r < radius(zeta(r))``;
    the general Lipschitz constant is not monotone in ``zeta``, so ``radius(0)``
    need not bracket the crossing.
    """
    r0 = radius_at(0.0)
    if r0 <= 0:
        return 0.0, 0.0, "radius vanishes at zeta = 0"
    f = lambda r: radius_at(zeta_per_radius * r) - r  # noqa: E731
    hi = 1.0 if math.isinf(r0) else r0
    for _ in range(200):
        if f(hi) <= 0:
            break
        hi *= 2.0
    else:
        if math.isinf(radius_at(zeta_per_radius * hi)):
            return math.inf, math.inf, ""
        return None, 0.0, "no self-consistent radius"
    if math.isinf(radius_at(zeta_per_radius * hi)):
        return math.inf, math.inf, ""
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return zeta_per_radius * lo, lo, ""


def _lam_min(model, u_ref, x0, which, step):
    rep = operator_data(model, u_ref, x0, which, step).report()
    if not rep.coercive:
        raise SingularGramian(
            f"Gramian at the reference is not invertible (lambda_min={rep.lambda_min:.3e})",
            lambda_min=rep.lambda_min,
            lambda_max=rep.lambda_max,
            iterate=u_ref,
        )
    return rep.lambda_min


def admissible_radius(model, u_ref: ControlGrid, x0, which: int = 2, theta: float = 0.5, step: float = 1e-3, y_norm: float | None = None) -> Certificate:
    """Certified target radius around reference ``u_ref``.

    With ``y_norm`` the feasibility-ball radius ``zeta`` is computed from that
    target; without it a self-consistent radius is found by bisection.
    """
    lam = _lam_min(model, u_ref, x0, which, step)
    return _certify(model, u_ref, lam, which, theta, y_norm)


def zero_reference_certificate(model, x0, x1, which: int = 2, theta: float = 0.5, step: float = 1e-3, nodes: int = 201) -> Certificate:
    spec = target_displacement(model, x0, x1, which, step)
    u0 = ControlGrid.zeros(model.t0, model.T, nodes, model.inputs)
    cert = admissible_radius(model, u0, x0, which, theta, step, spec.y_norm)
    energy = (1 + theta) * spec.y_norm**2 / cert.lambda_min_ref
    return _replace(cert, energy_bound=energy)


def _replace(cert, **kw):
    from dataclasses import replace

    return replace(cert, **kw)


# ---------------------------------------------------------------------------
# reference search


@dataclass(frozen=True, eq=False)
class ReferenceSearchSpec:
    basis: list
    box: tuple = (-1.0, 1.0)
    budget: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.basis:
            raise ValueError("reference search needs at least one basis function")
        stack = np.array([b.values.ravel() for b in self.basis])
        if np.linalg.matrix_rank(stack) < len(self.basis):
            raise ValueError("reference basis is linearly dependent on the grid")

    def control(self, coef) -> ControlGrid:
        vals = sum(c * b.values for c, b in zip(coef, self.basis))
        return self.basis[0].with_values(vals)


def constant_basis(model, nodes: int) -> list:
    """One constant function per input channel."""
    out = []
    for c in range(model.inputs):
        v = np.zeros((nodes, model.inputs))
        v[:, c] = 1.0
        out.append(ControlGrid(model.t0, model.T, v))
    return out


def optimize_reference(model, x0, search: ReferenceSearchSpec, which: int = 2, theta: float = 0.5, step: float = 1e-3):
    """Nelder-Mead search for a reference maximizing the target-free radius.

    Returns ``(reference, certificate)``; never worse than the zero reference.
    """
    n = len(search.basis)
    lo, hi = search.box
    best = {"radius": -math.inf, "coef": None, "cert": None}

    def evaluate(coef):
        coef = np.asarray(coef, dtype=float)
        if np.any(coef < lo) or np.any(coef > hi):
            return None
        u = search.control(coef)
        try:
            cert = admissible_radius(model, u, x0, which, theta, step)
        except SingularGramian:
            return None
        if cert.reason:
            return None
        if cert.radius > best["radius"]:
            best.update(radius=cert.radius, coef=coef.copy(), cert=cert)
        return cert.radius

    r0 = evaluate(np.zeros(n))
    if r0 is not None and math.isinf(r0):
        return best["cert"].reference, best["cert"]

    def objective(coef):
        r = evaluate(coef)
        if r is None:
            return 1e6 * (1.0 + float(np.sum(np.abs(coef))))
        return -r

    rng = np.random.default_rng(search.seed)
    width = 0.1 * (hi - lo)
    simplex = [np.zeros(n)] + [np.eye(n)[j] * width * rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0]) for j in range(n)]
    optimize.minimize(
        objective,
        np.zeros(n),
        method="Nelder-Mead",
        options={"initial_simplex": np.array(simplex), "maxfev": search.budget, "xatol": 1e-8, "fatol": 1e-14},
    )
    if best["cert"] is None:
        raise EmptyAdmissibleSet("no admissible reference control found (the zero reference is infeasible)")
    return best["cert"].reference, best["cert"]
