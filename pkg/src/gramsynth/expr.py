"""Scalar expressions in ``t``, ``x1..xd`` and named parameters.

Expressions are parsed once into an immutable tree and compiled into closures
that accept plain floats, numpy arrays (batched evaluation) or :class:`Dual`
jets.  Derivatives are exact forward-mode derivatives: a :class:`Dual` carries
the value together with the first and (optionally) second derivative along a
single direction, so ``jacobian`` needs ``d`` passes and ``second_directional``
recovers the symmetric bilinear form by polarization.

Grammar (``^`` binds tighter than unary minus, and is right-associative)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?
    atom  := number | name | name '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import (
    ArityError,
    DomainError,
    ExpressionSyntaxError,
    NonFinite,
    UnknownIdentifier,
)

FUNCTIONS = ("sin", "cos", "tanh", "exp", "log", "sqrt", "abs")
BINARY_OPS = ("+", "-", "*", "/", "^")


# ---------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    """``t`` (index 0) or a state coordinate ``x<index>`` (1-based)."""

    index: int

    @property
    def name(self) -> str:
        return "t" if self.index == 0 else f"x{self.index}"


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of FUNCTIONS
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Param, Unary, Binary]


def Add(a, b):
    return Binary("+", a, b)


def Sub(a, b):
    return Binary("-", a, b)


def Mul(a, b):
    return Binary("*", a, b)


def Div(a, b):
    return Binary("/", a, b)


def Pow(a, b):
    return Binary("^", a, b)


def Neg(a):
    return Unary("neg", a)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_STATE = re.compile(r"x([1-9][0-9]*)$")


class _Parser:
    def __init__(self, text: str, dimension: int, params: frozenset):
        self.text = text
        self.dimension = dimension
        self.params = params
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _tokenize(self, text):
        tokens = []
        i = 0
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            m = _TOKEN.match(text, i)
            if m is None or m.end() == i:
                raise ExpressionSyntaxError(
                    f"unexpected character {text[i]!r}", _byte_offset(text, i), text
                )
            kind = m.lastgroup
            start = m.start(kind)
            tokens.append((kind, m.group(kind), start))
            i = m.end()
        tokens.append(("end", "", len(text)))
        return tokens

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message, tok=None, cls=ExpressionSyntaxError):
        tok = tok or self.peek()
        return cls(message, _byte_offset(self.text, tok[2]), self.text)

    def expect(self, op):
        tok = self.take()
        if tok[0] != "op" or tok[1] != op:
            found = tok[1] or "end of input"
            raise self.error(f"expected {op!r}, found {found!r}", tok)

    def parse(self) -> Expr:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error(f"unexpected token {tok[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return Unary("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "^":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        kind, value, _ = tok
        if kind == "num":
            return Const(float(value))
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                return self.call(tok)
            if value in FUNCTIONS:
                raise self.error(f"function {value!r} requires one argument", tok, ArityError)
            return self.identifier(tok)
        found = value or "end of input"
        raise self.error(f"unexpected token {found!r}", tok)

    def call(self, tok):
        name = tok[1]
        if name not in FUNCTIONS:
            raise self.error(f"unknown function {name!r}", tok, UnknownIdentifier)
        self.take()  # "("
        if self.peek()[0] == "op" and self.peek()[1] == ")":
            raise self.error(f"{name}() takes exactly one argument, got 0", tok, ArityError)
        arg = self.expr()
        nargs = 1
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.take()
            self.expr()
            nargs += 1
        if nargs != 1:
            raise self.error(f"{name}() takes exactly one argument, got {nargs}", tok, ArityError)
        self.expect(")")
        return Unary(name, arg)

    def identifier(self, tok):
        name = tok[1]
        if name == "t":
            return Var(0)
        m = _STATE.match(name)
        if m:
            i = int(m.group(1))
            if i > self.dimension:
                raise self.error(
                    f"state variable {name!r} out of range for dimension {self.dimension}",
                    tok,
                    UnknownIdentifier,
                )
            return Var(i)
        if name in self.params:
            return Param(name)
        raise self.error(f"unknown identifier {name!r}", tok, UnknownIdentifier)


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


def parse_expression(text: str, dimension: int, params: Iterable[str] = ()) -> Expr:
    """Parse ``text`` into an expression tree over ``t, x1..x<dimension>``.

    ``params`` lists the parameter names that may appear as free identifiers.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0, text)
    if dimension < 1:
        raise ValueError("dimension must be positive")
    return _Parser(text, dimension, frozenset(params)).parse()


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_const(v: float) -> str:
    if v < 0 or (v == 0 and math.copysign(1.0, v) < 0):
        return f"({v!r})"
    return repr(float(v))


def to_string(node: Expr) -> str:
    """Render ``node`` with the minimal parentheses the grammar needs."""
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Param):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            return "-" + _unary_operand(node.arg)
        return f"{node.op}({to_string(node.arg)})"
    op = node.op
    if op == "^":
        base = to_string(node.left)
        if not _is_atom(node.left):
            base = f"({base})"
        return f"{base}^{_unary_operand(node.right)}"
    left = to_string(node.left)
    right = to_string(node.right)
    if isinstance(node.left, Binary) and node.left.op in _PREC and _PREC[node.left.op] < _PREC[op]:
        left = f"({left})"
    if isinstance(node.right, Binary) and node.right.op in _PREC and _PREC[node.right.op] <= _PREC[op]:
        right = f"({right})"
    return f"{left} {op} {right}"


def _is_atom(node) -> bool:
    if isinstance(node, (Var, Param)):
        return True
    if isinstance(node, Const):
        return node.value >= 0 and math.copysign(1.0, node.value) > 0
    return isinstance(node, Unary) and node.op != "neg"


def _unary_operand(node) -> str:
    # operand of unary minus or right side of ^: another unary/power/atom is fine
    s = to_string(node)
    if isinstance(node, Binary) and node.op != "^":
        return f"({s})"
    return s


# ---------------------------------------------------------------------------
# tree utilities


def variables(node: Expr) -> set:
    """Indices of the variables referenced (0 is ``t``)."""
    if isinstance(node, Var):
        return {node.index}
    if isinstance(node, Unary):
        return variables(node.arg)
    if isinstance(node, Binary):
        return variables(node.left) | variables(node.right)
    return set()


def bind_params(node: Expr, params: Mapping[str, float]) -> Expr:
    """Replace every parameter by its value (done once, at model build time)."""
    if isinstance(node, Param):
        if node.name not in params:
            raise UnknownIdentifier(f"parameter {node.name!r} has no value")
        return Const(float(params[node.name]))
    if isinstance(node, Unary):
        return Unary(node.op, bind_params(node.arg, params))
    if isinstance(node, Binary):
        return Binary(node.op, bind_params(node.left, params), bind_params(node.right, params))
    return node


# ---------------------------------------------------------------------------
# forward-mode jets


class Dual:
    """Truncated Taylor jet ``value + first*e + second*e^2/2`` along one direction.

    ``second`` may be ``None`` when only first derivatives are wanted; the
    second-order terms are then skipped entirely.
    """

    __slots__ = ("value", "first", "second")
    # make ``ndarray op Dual`` defer to the reflected Dual operators
    __array_ufunc__ = None

    def __init__(self, value, first=0.0, second=None):
        self.value = value
        self.first = first
        self.second = second

    def __repr__(self):
        return f"Dual({self.value!r}, {self.first!r}, {self.second!r})"

    # f(a) with f' and f'' evaluated at a.value
    def _chain(self, f0, f1, f2=None):
        second = None
        if self.second is not None:
            second = f2 * self.first * self.first + f1 * self.second
        return Dual(f0, f1 * self.first, second)

    def __neg__(self):
        return Dual(-self.value, -self.first, None if self.second is None else -self.second)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.first + other.first, _add2(self.second, other.second))
        return Dual(self.value + other, self.first, self.second)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            s2 = None if other.second is None else -other.second
            return Dual(self.value - other.value, self.first - other.first, _add2(self.second, s2))
        return Dual(self.value - other, self.first, self.second)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            a, a1, a2 = self.value, self.first, self.second
            b, b1, b2 = other.value, other.first, other.second
            second = None
            if a2 is not None or b2 is not None:
                second = 2.0 * a1 * b1
                if a2 is not None:
                    second = second + a2 * b
                if b2 is not None:
                    second = second + a * b2
            return Dual(a * b, a1 * b + a * b1, second)
        return Dual(self.value * other, self.first * other, None if self.second is None else self.second * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            _check_nonzero(other.value)
            b, b1, b2 = other.value, other.first, other.second
            q = self.value / b
            q1 = (self.first - q * b1) / b
            second = None
            if self.second is not None or b2 is not None:
                num = -2.0 * q1 * b1
                if self.second is not None:
                    num = num + self.second
                if b2 is not None:
                    num = num - q * b2
                second = num / b
            return Dual(q, q1, second)
        _check_nonzero(other)
        return Dual(self.value / other, self.first / other, None if self.second is None else self.second / other)

    def __rtruediv__(self, other):
        return Dual(other, 0.0, None if self.second is None else 0.0) / self


def _add2(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _check_nonzero(v):
    if np.any(np.asarray(v) == 0):
        raise DomainError("division by zero")


def _val(a):
    return a.value if isinstance(a, Dual) else a


def _sin(a):
    if isinstance(a, Dual):
        s, c = np.sin(a.value), np.cos(a.value)
        return a._chain(s, c, -s)
    return np.sin(a)


def _cos(a):
    if isinstance(a, Dual):
        s, c = np.sin(a.value), np.cos(a.value)
        return a._chain(c, -s, -c)
    return np.cos(a)


def _tanh(a):
    if isinstance(a, Dual):
        th = np.tanh(a.value)
        d1 = 1.0 - th * th
        return a._chain(th, d1, -2.0 * th * d1)
    return np.tanh(a)


def _exp(a):
    if isinstance(a, Dual):
        e = np.exp(a.value)
        return a._chain(e, e, e)
    return np.exp(a)


def _log(a):
    v = _val(a)
    if np.any(np.asarray(v) <= 0):
        raise DomainError("log of a nonpositive number")
    if isinstance(a, Dual):
        inv = 1.0 / v
        return a._chain(np.log(v), inv, -inv * inv)
    return np.log(a)


def _sqrt(a):
    v = _val(a)
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of a negative number")
    if isinstance(a, Dual):
        r = np.sqrt(v)
        if np.any(np.asarray(r) == 0):
            raise DomainError("sqrt is not differentiable at 0")
        d1 = 0.5 / r
        return a._chain(r, d1, -0.5 * d1 / v)
    return np.sqrt(a)


def _abs(a):
    if isinstance(a, Dual):
        return a._chain(np.abs(a.value), np.sign(a.value), 0.0)
    return np.abs(a)


_UNARY = {
    "neg": lambda a: -a,
    "sin": _sin,
    "cos": _cos,
    "tanh": _tanh,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "abs": _abs,
}


def _pow_const(a, c: float):
    if c == 0.0:
        return 1.0
    if c == 1.0:
        return a
    v = _val(a)
    is_int = float(c).is_integer()
    if is_int and c < 0 or not is_int and c < 1.0:
        if np.any(np.asarray(v) == 0):
            raise DomainError("0 raised to a power with a singular derivative")
    if not is_int and np.any(np.asarray(v) < 0):
        raise DomainError("negative base with a non-integer exponent")
    if isinstance(a, Dual):
        if is_int:
            n = int(c)
            if n == 2:
                return a * a
            f1 = c * v ** (n - 1)
            f2 = c * (c - 1.0) * v ** (n - 2) if n != 1 else 0.0
            return a._chain(v**n, f1, f2)
        return a._chain(v**c, c * v ** (c - 1.0), c * (c - 1.0) * v ** (c - 2.0))
    if is_int:
        return v ** int(c)
    return np.power(v, c)


def _pow(a, b):
    if not isinstance(b, Dual) and np.ndim(b) == 0:
        return _pow_const(a, float(b))
    return _exp(b * _log(a))


def _div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return a / b
    _check_nonzero(b)
    return a / b


_BINARY = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _div,
    "^": _pow,
}


# ---------------------------------------------------------------------------
# compilation and evaluation

Compiled = Callable[[Sequence], object]


def compile_expr(node: Expr, params: Mapping[str, float] | None = None) -> Compiled:
    """Compile ``node`` into ``f(env)`` where ``env[0]`` is t and ``env[i]`` is x_i."""
    if isinstance(node, Const):
        v = node.value
        return lambda env: v
    if isinstance(node, Var):
        i = node.index
        return lambda env: env[i]
    if isinstance(node, Param):
        if params is None or node.name not in params:
            raise UnknownIdentifier(f"parameter {node.name!r} has no value")
        v = float(params[node.name])
        return lambda env: v
    if isinstance(node, Unary):
        f = _UNARY[node.op]
        g = compile_expr(node.arg, params)
        return lambda env: f(g(env))
    if node.op == "^" and isinstance(node.right, Const):
        c = node.right.value
        g = compile_expr(node.left, params)
        return lambda env: _pow_const(g(env), c)
    f = _BINARY[node.op]
    gl = compile_expr(node.left, params)
    gr = compile_expr(node.right, params)
    return lambda env: f(gl(env), gr(env))


class CompiledField:
    """A vector of compiled expressions evaluated together.

    All methods accept a single state ``x`` of shape ``(d,)`` or a batch of
    shape ``(n, d)``; ``t`` is a scalar or an array broadcastable to ``(n,)``.
    """

    def __init__(self, exprs: Sequence[Expr], dimension: int, params: Mapping[str, float] | None = None):
        self.exprs = tuple(exprs)
        self.dimension = dimension
        self._fns = [compile_expr(e, params) for e in self.exprs]
        self.uses_state = any(variables(e) - {0} for e in self.exprs)

    def __len__(self):
        return len(self._fns)

    def _env(self, t, x, seeds=None):
        env = [t]
        for i in range(self.dimension):
            xi = x[..., i]
            if seeds is not None:
                xi = Dual(xi, *seeds(i))
            env.append(xi)
        return env

    def _out_shape(self, x):
        return x.shape[:-1]

    def _stack(self, parts, shape):
        return np.stack([np.broadcast_to(np.asarray(p, dtype=float), shape) for p in parts], axis=-1)

    def value(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        env = self._env(t, x)
        out = self._stack([f(env) for f in self._fns], self._out_shape(x))
        _check_finite(out)
        return out

    def jvp(self, t, x, v) -> tuple[np.ndarray, np.ndarray]:
        """Value and directional derivative ``D field(x)[v]``."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        env = self._env(t, x, lambda i: (v[..., i],))
        res = [f(env) for f in self._fns]
        shape = np.broadcast_shapes(self._out_shape(x), v.shape[:-1])
        val = self._stack([_val(r) for r in res], shape)
        der = self._stack([r.first if isinstance(r, Dual) else 0.0 for r in res], shape)
        _check_finite(val)
        _check_finite(der)
        return val, der

    def jacobian(self, t, x) -> tuple[np.ndarray, np.ndarray]:
        """Value and Jacobian, shape ``(..., m, d)`` with entry ``(i, j) = d f_i / d x_j``."""
        x = np.asarray(x, dtype=float)
        shape = self._out_shape(x)
        cols = []
        val = None
        for j in range(self.dimension):
            env = self._env(t, x, lambda i, j=j: (1.0 if i == j else 0.0,))
            res = [f(env) for f in self._fns]
            if val is None:
                val = self._stack([_val(r) for r in res], shape)
            cols.append(self._stack([r.first if isinstance(r, Dual) else 0.0 for r in res], shape))
        jac = np.stack(cols, axis=-1)
        _check_finite(val)
        _check_finite(jac)
        return val, jac

    def second_along(self, t, x, v) -> np.ndarray:
        """``D^2 field(x)[v, v]``."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        env = self._env(t, x, lambda i: (v[..., i], 0.0))
        res = [f(env) for f in self._fns]
        shape = np.broadcast_shapes(self._out_shape(x), v.shape[:-1])
        out = self._stack([r.second if isinstance(r, Dual) and r.second is not None else 0.0 for r in res], shape)
        _check_finite(out)
        return out

    def second_directional(self, t, x, h, w) -> np.ndarray:
        """Symmetric bilinear ``D^2 field(x)[h, w]`` by polarization."""
        h = np.asarray(h, dtype=float)
        w = np.asarray(w, dtype=float)
        return 0.25 * (self.second_along(t, x, h + w) - self.second_along(t, x, h - w))


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise NonFinite("non-finite value in field evaluation")


def _as_field(field, dimension=None):
    exprs = list(field)
    if dimension is None:
        dimension = max([max(variables(e) | {0}) for e in exprs] + [1])
    return exprs, dimension


def eval_field(field: Sequence[Expr], t: float, x, params: Mapping[str, float] | None = None) -> np.ndarray:
    """Evaluate each component of ``field`` at ``(t, x)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    exprs, _ = _as_field(field)
    return CompiledField(exprs, x.shape[-1], params).value(t, x)


def jacobian(field: Sequence[Expr], t: float, x, params: Mapping[str, float] | None = None) -> np.ndarray:
    """Exact Jacobian of ``field`` at ``(t, x)`` from ``d`` forward-mode passes."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    exprs, _ = _as_field(field)
    return CompiledField(exprs, x.shape[-1], params).jacobian(t, x)[1]


def second_directional(field: Sequence[Expr], t: float, x, h, w, params: Mapping[str, float] | None = None) -> np.ndarray:
    """``D^2 field(t, x)[h, w]``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    exprs, _ = _as_field(field)
    return CompiledField(exprs, x.shape[-1], params).second_directional(t, x, h, w)
