"""Reverse-mode automatic differentiation on scalars.

Every arithmetic operation on a :class:`Scalar` appends one node to its
:class:`Tape`.  Nodes are appended in evaluation order, so the tape is a
topological order by construction and a single reverse sweep populates the
adjoints of all recorded nodes.

    >>> tape = Tape()
    >>> x = lift(3.0, tape)
    >>> y = x * x
    >>> backward(y)[x]
    6.0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# sech(x) = 2 / (e^x + e^-x) overflows past |x| ~ 710.
SECH_CLAMP = 700.0


class DomainError(ValueError):
    """Raised when an operation is applied outside its domain."""


class UsageError(RuntimeError):
    """Raised when the engine is used inconsistently (e.g. mixed tapes)."""


def _forward(op: str, a: float, b: float | None) -> float:
    if op == "input":
        return a
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    if op == "neg":
        return -a
    if op == "exp":
        return math.exp(a)
    if op == "log":
        return math.log(a)
    if op == "tanh":
        return math.tanh(a)
    if op == "sech":
        return 0.0 if abs(a) > SECH_CLAMP else 2.0 / (math.exp(a) + math.exp(-a))
    if op == "sigmoid":
        return _sigmoid(a)
    if op == "abs":
        return abs(a)
    if op == "min":
        return a if a <= b else b
    if op == "max":
        return a if a >= b else b
    if op == "pow":
        return a**b
    raise UsageError(f"unknown op {op!r}")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class Tape:
    """Ordered record of primitive operations.

    Operands that are plain floats are stored as constants in the node, so
    replay only ever needs the values of earlier nodes.
    """

    __slots__ = ("ops", "parents", "partials", "consts", "values")

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        # (left-const, right-const); None where the operand is a node
        self.consts: list[tuple[float | None, float | None]] = []
        self.values: list[float] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _record(self, op, value, parents, partials, consts=(None, None)) -> "Scalar":
        idx = len(self.ops)
        self.ops.append(op)
        self.parents.append(parents)
        self.partials.append(partials)
        self.consts.append(consts)
        self.values.append(value)
        return Scalar(self, idx, value)

    def replay(self, inputs: dict[int, float] | None = None) -> list[float]:
        """Recompute every node value from the recorded operations.

        ``inputs`` optionally overrides input-node values by tape index.
        Control flow is frozen at recording time, so new input values only
        give meaningful results where the recorded branch is still valid.
        """
        inputs = inputs or {}
        vals: list[float] = []
        for i, op in enumerate(self.ops):
            if op == "input":
                vals.append(float(inputs.get(i, self.values[i])))
                continue
            ca, cb = self.consts[i]
            ps = self.parents[i]
            k = 0
            if ca is None:
                a = vals[ps[k]]
                k += 1
            else:
                a = ca
            if op in _UNARY:
                b = None
            elif cb is None:
                b = vals[ps[k]]
            else:
                b = cb
            vals.append(_forward(op, a, b))
        return vals


_UNARY = frozenset({"input", "neg", "exp", "log", "tanh", "sech", "sigmoid", "abs"})


class Scalar:
    """A real value tracked on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: Tape, idx: int, value: float) -> None:
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self) -> str:
        return f"Scalar({self.value!r})"

    def __float__(self) -> float:
        return self.value

    # Binary operations record (parents, partials) for the operands that are
    # nodes; constant operands are kept in the node and carry no adjoint.
    def _other(self, other):
        if isinstance(other, Scalar):
            if other.tape is not self.tape:
                raise UsageError("operands live on different tapes")
            return other
        return float(other)

    def __add__(self, other):
        o = self._other(other)
        if isinstance(o, Scalar):
            return self.tape._record("add", self.value + o.value, (self.idx, o.idx), (1.0, 1.0))
        return self.tape._record("add", self.value + o, (self.idx,), (1.0,), (None, o))

    def __radd__(self, other):
        o = float(other)
        return self.tape._record("add", o + self.value, (self.idx,), (1.0,), (o, None))

    def __sub__(self, other):
        o = self._other(other)
        if isinstance(o, Scalar):
            return self.tape._record("sub", self.value - o.value, (self.idx, o.idx), (1.0, -1.0))
        return self.tape._record("sub", self.value - o, (self.idx,), (1.0,), (None, o))

    def __rsub__(self, other):
        o = float(other)
        return self.tape._record("sub", o - self.value, (self.idx,), (-1.0,), (o, None))

    def __mul__(self, other):
        o = self._other(other)
        if isinstance(o, Scalar):
            return self.tape._record(
                "mul", self.value * o.value, (self.idx, o.idx), (o.value, self.value)
            )
        return self.tape._record("mul", self.value * o, (self.idx,), (o,), (None, o))

    def __rmul__(self, other):
        o = float(other)
        return self.tape._record("mul", o * self.value, (self.idx,), (o,), (o, None))

    def __truediv__(self, other):
        o = self._other(other)
        a = self.value
        if isinstance(o, Scalar):
            b = o.value
            return self.tape._record("div", a / b, (self.idx, o.idx), (1.0 / b, -a / (b * b)))
        return self.tape._record("div", a / o, (self.idx,), (1.0 / o,), (None, o))

    def __rtruediv__(self, other):
        o = float(other)
        b = self.value
        return self.tape._record("div", o / b, (self.idx,), (-o / (b * b),), (o, None))

    def __pow__(self, exponent):
        if isinstance(exponent, Scalar):
            raise UsageError("only constant exponents are supported")
        e = float(exponent)
        a = self.value
        d = e * a ** (e - 1.0) if e != 0 else 0.0
        return self.tape._record("pow", a**e, (self.idx,), (d,), (None, e))

    def __neg__(self):
        return self.tape._record("neg", -self.value, (self.idx,), (-1.0,))

    def __pos__(self):
        return self

    def __abs__(self):
        return sabs(self)

    # Comparisons are on values only and are never recorded.
    def __lt__(self, other):
        return self.value < float(other)

    def __le__(self, other):
        return self.value <= float(other)

    def __gt__(self, other):
        return self.value > float(other)

    def __ge__(self, other):
        return self.value >= float(other)


def lift(x: float, tape: Tape) -> Scalar:
    """Register ``x`` as an input on ``tape``."""
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"cannot lift non-finite value {x!r}")
    return tape._record("input", x, (), ())


def _unary(x, op: str, value: float, partial: float):
    if not isinstance(x, Scalar):
        return value
    return x.tape._record(op, value, (x.idx,), (partial,))


def exp(x):
    try:
        v = math.exp(float(x))
    except OverflowError:
        v = math.inf
    return _unary(x, "exp", v, v)


def log(x):
    xv = float(x)
    if xv <= 0:
        raise DomainError(f"log of non-positive value {xv!r}")
    return _unary(x, "log", math.log(xv), 1.0 / xv)


def tanh(x):
    v = math.tanh(float(x))
    return _unary(x, "tanh", v, 1.0 - v * v)


def sech(x):
    """Hyperbolic secant; exactly 0 with zero slope beyond ``|x| > 700``."""
    xv = float(x)
    if abs(xv) > SECH_CLAMP:
        return _unary(x, "sech", 0.0, 0.0)
    v = 2.0 / (math.exp(xv) + math.exp(-xv))
    return _unary(x, "sech", v, -v * math.tanh(xv))


def sigmoid(x):
    v = _sigmoid(float(x))
    return _unary(x, "sigmoid", v, v * (1.0 - v))


def sabs(x):
    """``|x|`` with derivative 0 at exactly 0."""
    xv = float(x)
    d = 1.0 if xv > 0 else (-1.0 if xv < 0 else 0.0)
    return _unary(x, "abs", abs(xv), d)


def _minmax(a, b, op: str):
    av, bv = float(a), float(b)
    pick_a = av <= bv if op == "min" else av >= bv
    value = av if pick_a else bv
    if isinstance(a, Scalar) and isinstance(b, Scalar):
        if a.tape is not b.tape:
            raise UsageError("operands live on different tapes")
        return a.tape._record(op, value, (a.idx, b.idx), (1.0, 0.0) if pick_a else (0.0, 1.0))
    if isinstance(a, Scalar):
        return a.tape._record(op, value, (a.idx,), (1.0 if pick_a else 0.0,), (None, bv))
    if isinstance(b, Scalar):
        return b.tape._record(op, value, (b.idx,), (0.0 if pick_a else 1.0,), (av, None))
    return value


def smin(a, b):
    """Crisp minimum; the adjoint flows to the selected operand (``a`` on ties)."""
    return _minmax(a, b, "min")


def smax(a, b):
    """Crisp maximum; the adjoint flows to the selected operand (``a`` on ties)."""
    return _minmax(a, b, "max")


def value_of(x) -> float:
    return x.value if isinstance(x, Scalar) else float(x)


def tape_of(*xs) -> Tape | None:
    """The tape shared by the Scalars among ``xs`` (None if there are none)."""
    tape = None
    for x in xs:
        if isinstance(x, Scalar):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("operands live on different tapes")
    return tape


class Gradients:
    """Adjoints from one backward sweep, indexed by the input Scalars."""

    def __init__(self, tape: Tape, adjoints: np.ndarray) -> None:
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, x: Scalar) -> float:
        if not isinstance(x, Scalar) or x.tape is not self._tape:
            raise UsageError("gradient requested for a value not on this tape")
        if x.idx >= len(self._adj):
            # recorded after the output, so it cannot influence it
            return 0.0
        return float(self._adj[x.idx])

    def of(self, xs: Iterable[Scalar]) -> list[float]:
        return [self[x] for x in xs]


def backward(output: Scalar) -> Gradients:
    """Reverse sweep from ``output``; returns d output / d node for all nodes."""
    if not isinstance(output, Scalar):
        raise UsageError("backward() needs a Scalar recorded on a tape")
    tape = output.tape
    n = output.idx + 1
    if n > len(tape) or tape.values[output.idx] is not output.value:
        raise UsageError("output is not recorded on its tape")
    adj = [0.0] * n
    adj[output.idx] = 1.0
    parents, partials = tape.parents, tape.partials
    for i in range(output.idx, -1, -1):
        g = adj[i]
        if g == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adj[p] += g * d
    return Gradients(tape, np.asarray(adj))


@dataclass
class GradcheckReport:
    analytic: list[float]
    numeric: list[float]
    errors: list[float]
    tol: float
    problems: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return not self.problems and self.max_error <= self.tol


def gradcheck(
    f: Callable[[Sequence[Scalar]], Scalar],
    point: Sequence[float],
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes a list of Scalars (all on one fresh tape) and returns a
    Scalar.  Error per component is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    Non-finite values are reported in ``problems`` rather than raised.
    """
    if h <= 0:
        raise DomainError("step h must be positive")
    point = [float(v) for v in point]

    def evaluate(pt):
        tape = Tape()
        xs = [lift(v, tape) for v in pt]
        return xs, f(xs)

    problems: list[str] = []
    try:
        xs, out = evaluate(point)
    except (ArithmeticError, DomainError) as exc:
        problems.append(f"evaluation failed: {exc}")
        n = len(point)
        return GradcheckReport([math.nan] * n, [math.nan] * n, [math.inf] * n, tol, problems)
    if not math.isfinite(value_of(out)):
        problems.append(f"non-finite output {value_of(out)!r}")
    if isinstance(out, Scalar):
        analytic = backward(out).of(xs)
    else:
        analytic = [0.0] * len(point)

    numeric, errors = [], []
    for i in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[i] += h
        lo[i] -= h
        try:
            fp = value_of(evaluate(hi)[1])
            fm = value_of(evaluate(lo)[1])
            g = (fp - fm) / (2.0 * h)
        except (ArithmeticError, DomainError):
            g = math.nan
        numeric.append(g)
        if not (math.isfinite(g) and math.isfinite(analytic[i])):
            problems.append(f"non-finite gradient in component {i}")
            errors.append(math.inf)
        else:
            errors.append(abs(analytic[i] - g) / max(1.0, abs(g)))
    return GradcheckReport(analytic, numeric, errors, tol, problems)
