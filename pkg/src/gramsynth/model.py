"""System models ``x' = N_t(x) + B(t,x) u`` and ``x' = A(t,x) N_t(x) + B(t,x) u``.

A :class:`SystemModel` is built once from a configuration mapping and is
immutable afterwards.  Everything downstream talks to it through a small
batched interface:

``vector_field(t, x)``
    the (effective) drift, ``N_t(x)`` or ``A(t,x) N_t(x)``;
``field_jacobian(t, x)``
    drift value and Jacobian;
``field_second(t, x, h, w)``
    second derivative of the drift, ``D^2 f(x)[h, w]``;
``input(t, x)``
    input matrix ``B(t, x)`` of shape ``(..., d, k)``;
``input_state_jacobian(t, x, u)``
    ``d/dx (B(t,x) u)``, the ``D_xB(t,x)[u, .]`` term of the linearization.

:class:`gramsynth.freeze.FrozenModel` implements the same interface.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex
from .errors import InconsistentDimensions, NonFinite, SchemaError

# sup |tanh''| = 4/(3*sqrt(3)), attained where tanh = 1/sqrt(3)
TANH_SECOND_SUP = 4.0 / (3.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class ModelBounds:
    lambda1: float
    lambda2: float
    l_b: float
    b_sup: float
    a_sup: float | None = None
    b_lower: str | None = None  # expression in t

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "l_b"):
            if not getattr(self, name) >= 0:
                raise SchemaError(f"bound {name} must be nonnegative")
        if not self.b_sup > 0:
            raise SchemaError("bound b_sup must be positive")
        if self.a_sup is not None and not self.a_sup >= 0:
            raise SchemaError("bound a_sup must be nonnegative")

    @property
    def q(self) -> float | None:
        return self.lambda2 / self.lambda1 if self.lambda1 > 0 else None

    @property
    def lambda3(self) -> float | None:
        return None if self.a_sup is None else self.lambda1 * self.a_sup

    @property
    def lambda4(self) -> float | None:
        return None if self.a_sup is None else self.lambda2 * self.a_sup


@dataclass(frozen=True)
class HopfieldParams:
    decay: tuple  # diagonal of D
    connectivity: tuple  # rows of W

    def __post_init__(self):
        d = len(self.decay)
        if any(not v > 0 for v in self.decay):
            raise SchemaError("Hopfield decay entries must be positive")
        if len(self.connectivity) != d or any(len(r) != d for r in self.connectivity):
            raise InconsistentDimensions("Hopfield W must be d x d")

    @classmethod
    def from_arrays(cls, decay, connectivity):
        decay = np.asarray(decay, dtype=float)
        if decay.ndim == 2:
            decay = np.diag(decay)
        return cls(tuple(float(v) for v in decay), tuple(tuple(float(v) for v in r) for r in connectivity))

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.decay)

    @property
    def W(self) -> np.ndarray:
        return np.array(self.connectivity, dtype=float)

    def drift_strings(self) -> list[str]:
        """``-d_i x_i + sum_j w_ij tanh(x_j)`` for each coordinate."""
        out = []
        for i, di in enumerate(self.decay, start=1):
            s = f"-x{i}" if di == 1.0 else f"-{di!r}*x{i}"
            for j, w in enumerate(self.connectivity[i - 1], start=1):
                if w == 0.0:
                    continue
                mag = abs(w)
                term = f"tanh(x{j})" if mag == 1.0 else f"{mag!r}*tanh(x{j})"
                s += (" + " if w > 0 else " - ") + term
            out.append(s)
        return out


@dataclass(frozen=True)
class HopfieldRates:
    gamma: float
    gamma1: float
    gamma2: float
    sigma_sup: float


def hopfield_rates(params: HopfieldParams) -> HopfieldRates:
    """Growth rates of the Hopfield flow.

    ``sigma_sup = sup_x ||W Dsigma(x)|| = ||W||`` because tanh' peaks at 1 at the
    origin for every coordinate simultaneously.
    """
    w_norm = float(np.linalg.norm(params.W, 2)) if len(params.decay) else 0.0
    lam = np.asarray(params.decay)
    return HopfieldRates(
        gamma=-float(lam.min()) + w_norm,
        gamma1=float(lam.max()) + w_norm,
        gamma2=w_norm * TANH_SECOND_SUP,
        sigma_sup=w_norm,
    )


class HopfieldDrift:
    """Closed-form ``-D x + W tanh(x)`` with the :class:`~gramsynth.expr.CompiledField` interface."""

    uses_state = True

    def __init__(self, params: HopfieldParams):
        self.dimension = len(params.decay)
        self._d = np.asarray(params.decay, dtype=float)
        self._w = params.W

    def __len__(self):
        return self.dimension

    def _check(self, *arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFinite("non-finite value in field evaluation")

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        out = -self._d * x + np.tanh(x) @ self._w.T
        self._check(out)
        return out

    def jvp(self, t, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        th = np.tanh(x)
        val = -self._d * x + th @ self._w.T
        der = -self._d * v + ((1.0 - th * th) * v) @ self._w.T
        val, der = np.broadcast_arrays(val, der)
        self._check(val, der)
        return val, der

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        th = np.tanh(x)
        val = -self._d * x + th @ self._w.T
        jac = self._w * (1.0 - th * th)[..., None, :] - np.diag(self._d)
        self._check(val, jac)
        return val, jac

    def second_directional(self, t, x, h, w):
        th = np.tanh(np.asarray(x, dtype=float))
        # d^2/dx^2 tanh = -2 tanh sech^2
        out = (-2.0 * th * (1.0 - th * th) * np.asarray(h, dtype=float) * np.asarray(w, dtype=float)) @ self._w.T
        self._check(out)
        return out


class ConstantField:
    """A field with no dependence on ``t`` or ``x``."""

    uses_state = False

    def __init__(self, values, dimension: int):
        self.dimension = dimension
        self._c = np.asarray(values, dtype=float)

    def __len__(self):
        return self._c.size

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._c, np.broadcast_shapes(x.shape[:-1], np.shape(t)) + self._c.shape).copy()

    def jvp(self, t, x, v):
        val = self.value(t, np.asarray(x, dtype=float) + 0.0 * np.asarray(v, dtype=float))
        return val, np.zeros_like(val)

    def jacobian(self, t, x):
        val = self.value(t, x)
        return val, np.zeros(val.shape + (self.dimension,))

    def second_directional(self, t, x, h, w):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(h)[:-1], np.shape(w)[:-1])
        return np.zeros(shape + self._c.shape)


def _compile(exprs, dimension):
    if all(not ex.variables(e) for e in exprs):
        return ConstantField([ex.compile_expr(e)([0.0] * (dimension + 1)) for e in exprs], dimension)
    return ex.CompiledField(exprs, dimension)


class SystemModel:
    """Validated control-affine model with compiled expression fields."""

    def __init__(
        self,
        dimension: int,
        inputs: int,
        t0: float,
        T: float,
        drift: Sequence[ex.Expr],
        input_matrix: Sequence[Sequence[ex.Expr]],
        bounds: ModelBounds,
        modulation: Sequence[Sequence[ex.Expr]] | None = None,
        hopfield: HopfieldParams | None = None,
        source: Mapping | None = None,
    ):
        if dimension < 1 or inputs < 1:
            raise SchemaError("dimension and inputs must be positive")
        if not T > t0:
            raise SchemaError("horizon must satisfy T > t0")
        if len(drift) != dimension:
            raise InconsistentDimensions(f"drift has {len(drift)} components, expected {dimension}")
        if len(input_matrix) != dimension or any(len(r) != inputs for r in input_matrix):
            raise InconsistentDimensions(f"input_matrix must be {dimension} x {inputs}")
        if modulation is not None and (
            len(modulation) != dimension or any(len(r) != dimension for r in modulation)
        ):
            raise InconsistentDimensions(f"modulation must be {dimension} x {dimension}")
        self.dimension = dimension
        self.inputs = inputs
        self.t0 = float(t0)
        self.T = float(T)
        self.drift = tuple(drift)
        self.input_matrix = tuple(tuple(r) for r in input_matrix)
        self.modulation = None if modulation is None else tuple(tuple(r) for r in modulation)
        self.bounds = bounds
        self.hopfield = hopfield
        self.source = dict(source) if source is not None else None
        d, k = dimension, inputs
        self._N = HopfieldDrift(hopfield) if hopfield is not None else ex.CompiledField(self.drift, d)
        self._B = _compile([e for r in self.input_matrix for e in r], d)
        self._A = None if self.modulation is None else _compile([e for r in self.modulation for e in r], d)
        self._b_lower = None if bounds.b_lower is None else ex.compile_expr(ex.parse_expression(bounds.b_lower, d))
        self.input_state_dependent = self._B.uses_state
        self.modulation_state_dependent = self._A is not None and self._A.uses_state
        self._shape_B = (d, k)

    # -- identity ----------------------------------------------------------

    @property
    def delta_t(self) -> float:
        return self.T - self.t0

    @property
    def is_general(self) -> bool:
        return self.modulation is not None

    @property
    def regime(self) -> str:
        return "general" if self.is_general else "baseline"

    def with_horizon(self, t0: float, T: float) -> "SystemModel":
        """Same dynamics and bounds on a different time window."""
        return SystemModel(
            self.dimension, self.inputs, t0, T, self.drift, self.input_matrix, self.bounds,
            self.modulation, self.hopfield, self.source,
        )

    def config_hash(self) -> str | None:
        if self.source is None:
            return None
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def without_modulation(self) -> "SystemModel":
        """The baseline model ``x' = N_t(x) + B(t,x) u`` underlying a general one."""
        return SystemModel(
            self.dimension, self.inputs, self.t0, self.T, self.drift, self.input_matrix, self.bounds,
            None, self.hopfield, self.source,
        )

    # -- dynamics interface -------------------------------------------------

    def base_drift(self, t, x) -> np.ndarray:
        """``N_t(x)`` without modulation."""
        return self._N.value(t, x)

    def base_drift_jacobian(self, t, x):
        return self._N.jacobian(t, x)

    def base_drift_second(self, t, x, h, w):
        return self._N.second_directional(t, x, h, w)

    def modulation_matrix(self, t, x) -> np.ndarray:
        if self._A is None:
            raise ValueError("model has no modulation")
        x = np.asarray(x, dtype=float)
        return self._A.value(t, x).reshape(x.shape[:-1] + (self.dimension, self.dimension))

    def vector_field(self, t, x) -> np.ndarray:
        n = self._N.value(t, x)
        if self._A is None:
            return n
        a = self.modulation_matrix(t, x)
        return np.einsum("...ij,...j->...i", a, n)

    def field_jacobian(self, t, x):
        n, dn = self._N.jacobian(t, x)
        if self._A is None:
            return n, dn
        x = np.asarray(x, dtype=float)
        d = self.dimension
        a, da = self._A.jacobian(t, x)
        a = a.reshape(x.shape[:-1] + (d, d))
        da = da.reshape(x.shape[:-1] + (d, d, d))
        f = np.einsum("...ij,...j->...i", a, n)
        df = np.einsum("...ij,...jl->...il", a, dn) + np.einsum("...ijl,...j->...il", da, n)
        return f, df

    def field_second(self, t, x, h, w) -> np.ndarray:
        d2n = self._N.second_directional(t, x, h, w)
        if self._A is None:
            return d2n
        x = np.asarray(x, dtype=float)
        d = self.dimension
        shp = np.broadcast_shapes(x.shape[:-1], np.shape(h)[:-1], np.shape(w)[:-1]) + (d, d)
        n, dn_h = self._N.jvp(t, x, h)
        _, dn_w = self._N.jvp(t, x, w)
        a, da_h = self._A.jvp(t, x, h)
        _, da_w = self._A.jvp(t, x, w)
        d2a = self._A.second_directional(t, x, h, w)
        a, da_h, da_w, d2a = (np.broadcast_to(m, shp[:-2] + (d * d,)).reshape(shp) for m in (a, da_h, da_w, d2a))
        mv = lambda m, v: np.einsum("...ij,...j->...i", m, v)  # noqa: E731
        return mv(d2a, n) + mv(da_h, dn_w) + mv(da_w, dn_h) + mv(a, d2n)

    def input(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._B.value(t, x).reshape(x.shape[:-1] + self._shape_B)

    def input_state_jacobian(self, t, x, u) -> np.ndarray:
        """Matrix of ``y -> D_xB(t,x)[y] u``, shape ``(..., d, d)``."""
        x = np.asarray(x, dtype=float)
        d, k = self._shape_B
        if not self.input_state_dependent:
            return np.zeros(x.shape[:-1] + (d, d))
        _, jb = self._B.jacobian(t, x)
        jb = jb.reshape(x.shape[:-1] + (d, k, d))
        return np.einsum("...ilj,...l->...ij", jb, np.asarray(u, dtype=float))

    def input_tensor(self, t, x) -> np.ndarray:
        """``dB_il / dx_j`` with shape ``(..., d, k, d)``."""
        x = np.asarray(x, dtype=float)
        d, k = self._shape_B
        _, jb = self._B.jacobian(t, x)
        return jb.reshape(x.shape[:-1] + (d, k, d))

    def b_lower(self, t):
        if self._b_lower is None:
            return None
        env = [np.asarray(t, dtype=float)] + [0.0] * self.dimension
        return np.broadcast_to(np.asarray(self._b_lower(env), dtype=float), np.shape(t)).copy()


# ---------------------------------------------------------------------------
# construction from configuration


def _require(block, key, where="model"):
    if key not in block:
        raise SchemaError(f"missing required key {where}.{key}")
    return block[key]


def _parse_all(rows, d, params, what):
    try:
        return [[ex.bind_params(ex.parse_expression(str(e), d, params), params) for e in r] for r in rows]
    except ex.ExpressionSyntaxError as err:
        wrapped = type(err)(f"{what}: {err}", None, err.text)
        wrapped.offset = err.offset
        raise wrapped from err


def build_model(config: Mapping) -> SystemModel:
    """Build a :class:`SystemModel` from the ``model`` block of a configuration.

    Accepts either the full configuration document or just its ``model`` block.
    """
    block = config.get("model", config) if isinstance(config, Mapping) else None
    if not isinstance(block, Mapping):
        raise SchemaError("configuration must be a mapping with a 'model' block")
    d = _require(block, "dimension")
    k = _require(block, "inputs")
    if not (isinstance(d, int) and isinstance(k, int)) or d < 1 or k < 1:
        raise SchemaError("model.dimension and model.inputs must be positive integers")
    t0 = float(block.get("t0", 0.0))
    T = float(_require(block, "T"))
    params = {str(n): float(v) for n, v in (block.get("params") or {}).items()}

    hop = None
    if block.get("hopfield") is not None:
        hb = block["hopfield"]
        decay = _require(hb, "D", "model.hopfield")
        W = _require(hb, "W", "model.hopfield")
        if len(decay) != d:
            raise InconsistentDimensions(f"hopfield.D has {len(decay)} entries, expected {d}")
        hop = HopfieldParams.from_arrays(decay, W)
        if block.get("drift") is not None:
            raise SchemaError("give either model.drift or model.hopfield, not both")
        drift_text = hop.drift_strings()
    else:
        drift_text = _require(block, "drift")
    if not isinstance(drift_text, list):
        raise SchemaError("model.drift must be a list of expressions")
    if len(drift_text) != d:
        raise InconsistentDimensions(f"drift has {len(drift_text)} components, expected {d}")

    bmat = _require(block, "input_matrix")
    if not isinstance(bmat, list) or any(not isinstance(r, list) for r in bmat):
        raise SchemaError("model.input_matrix must be a list of rows")
    if len(bmat) != d or any(len(r) != k for r in bmat):
        raise InconsistentDimensions(f"input_matrix must be {d} x {k}")
    mod = block.get("modulation")
    if mod is not None and (len(mod) != d or any(len(r) != d for r in mod)):
        raise InconsistentDimensions(f"modulation must be {d} x {d}")

    bb = dict(_require(block, "bounds"))
    if hop is not None:
        rates = hopfield_rates(hop)
        bb.setdefault("lambda1", rates.gamma1)
        bb.setdefault("lambda2", rates.gamma2)
    try:
        bounds = ModelBounds(
            lambda1=float(_require(bb, "lambda1", "model.bounds")),
            lambda2=float(_require(bb, "lambda2", "model.bounds")),
            l_b=float(_require(bb, "l_b", "model.bounds")),
            b_sup=float(_require(bb, "b_sup", "model.bounds")),
            a_sup=None if bb.get("a_sup") is None else float(bb["a_sup"]),
            b_lower=None if bb.get("b_lower") is None else str(bb["b_lower"]),
        )
    except (TypeError, ValueError) as err:
        raise SchemaError(f"model.bounds: {err}") from err

    drift = [r[0] for r in _parse_all([[e] for e in drift_text], d, params, "drift")]
    B = _parse_all(bmat, d, params, "input_matrix")
    A = None if mod is None else _parse_all(mod, d, params, "modulation")
    if bounds.b_lower is not None:
        _parse_all([[bounds.b_lower]], d, {}, "bounds.b_lower")
    return SystemModel(d, k, t0, T, drift, B, bounds, A, hop, source=config)


# ---------------------------------------------------------------------------
# sampled bound check


@dataclass
class BoundReport:
    samples: int
    observed_lambda1: float
    observed_lambda2: float
    observed_l_b: float
    declared: dict
    violations: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "violated" if self.violations else "ok"

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "observed": {
                "lambda1": self.observed_lambda1,
                "lambda2": self.observed_lambda2,
                "l_b": self.observed_l_b,
            },
            "declared": self.declared,
            "violations": self.violations,
            "verdict": self.verdict,
        }


def _bilinear_sup(tensor: np.ndarray, rng: np.random.Generator, probes: int = 32) -> np.ndarray:
    """Lower estimate of ``sup_{|h|=1} ||T[h]||_2`` for ``T`` of shape (n, p, q, d).

    ``T[h] = sum_j h_j T[..., j]``.  Coordinate directions plus random unit
    probes; the result never exceeds the true supremum.
    """
    n, _, _, d = tensor.shape
    dirs = np.vstack([np.eye(d), rng.standard_normal((probes, d))])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best = np.zeros(n)
    for h in dirs:
        m = np.einsum("npqj,j->npq", tensor, h)
        best = np.maximum(best, np.linalg.norm(m, ord=2, axis=(1, 2)))
    return best


def validate_bounds(model: SystemModel, samples: int, box, seed: int = 0) -> BoundReport:
    """Falsification check of the declared global bounds on random samples.

    ``box`` is ``(lo, hi)`` applied to every coordinate or a list of per-coordinate
    pairs.  Observed norms are maxima over ``(t, x)`` drawn uniformly from
    ``[t0, T] x box``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    d = model.dimension
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (d, 1))
    rng = np.random.default_rng(seed)
    t = rng.uniform(model.t0, model.T, samples)
    x = rng.uniform(box[:, 0], box[:, 1], (samples, d))

    _, dn = model.base_drift_jacobian(t, x)
    obs1 = float(np.max(np.linalg.norm(dn, ord=2, axis=(1, 2))))

    eye = np.eye(d)
    tens = np.zeros((samples, d, d, d))  # [n, i, a, b] = d2N_i / dx_a dx_b
    for a in range(d):
        for b in range(a, d):
            v = model.base_drift_second(t, x, eye[a], eye[b])
            tens[:, :, a, b] = v
            tens[:, :, b, a] = v
    obs2 = float(np.max(_bilinear_sup(tens, rng)))

    if model.input_state_dependent:
        obs_b = float(np.max(_bilinear_sup(model.input_tensor(t, x), rng)))
    else:
        obs_b = 0.0

    declared = {"lambda1": model.bounds.lambda1, "lambda2": model.bounds.lambda2, "l_b": model.bounds.l_b}
    violations = [
        name
        for name, o in (("lambda1", obs1), ("lambda2", obs2), ("l_b", obs_b))
        if o > declared[name] * (1.0 + 1e-9)
    ]
    return BoundReport(samples, obs1, obs2, obs_b, declared, violations)
