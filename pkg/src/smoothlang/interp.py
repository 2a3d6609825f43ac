"""Smooth interpretation of WHILE programs.

Each statement is executed only to the extent of an execution probability
``p``.  Entering a loop iteration multiplies ``p`` by an exit-probability
function of the condition variable (``phi0`` for C0, ``phi_inf`` for C-inf),
and the simple statements become

    xa := xb       ->  xa := p*xb + (1-p)*xa
    xa := xa + 1   ->  xa := xa + p
    xa := xa - 1   ->  xa := xa - p

A loop stops once its probability drops to ``epsilon`` or below, or after
``max_iterations`` iterations.  All values live on one autodiff tape, so any
output can be differentiated with respect to any input.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    DomainError,
    Scalar,
    Tape,
    backward,
    lift,
    sabs,
    sech,
    sigmoid,
    smin,
    tape_of,
    value_of,
)
from .optim import Adam
from .while_lang import (
    DEFAULT_ITERATION_CAP,
    Assign,
    Dec,
    Inc,
    Program,
    Seq,
    Statement,
    While,
    parse_inputs,
    run_discrete,
    walk,
)


class Grade(str, enum.Enum):
    DISCRETE = "discrete"
    C0 = "c0"
    C_INF = "c_inf"

    @classmethod
    def parse(cls, text: str) -> "Grade":
        key = text.lower().replace("-", "_")
        aliases = {"cinf": "c_inf", "c_infinity": "c_inf", "c∞": "c_inf"}
        return cls(aliases.get(key, key))


@dataclass
class SmoothConfig:
    grade: Grade = Grade.C_INF
    # Above ~2.6, 1 - sech(s*x) exceeds |x| near 0, a decrement can jump
    # past 0 and loops on non-integer inputs stop converging.
    steepness: float = 2.0
    epsilon: float = 1e-7
    max_iterations: int = 10_000
    # smooth runs stop, flagged as truncated, once all loops together
    # exceed this many iterations
    max_total_iterations: int = 200_000
    # total loop entries allowed when the grade is discrete
    discrete_cap: int = DEFAULT_ITERATION_CAP
    # one (weight, bias) per simple statement, in source order
    calibration: list[tuple[float, float]] | None = None
    # keep every iteration's probability in the loop traces
    record_p: bool = False

    def __post_init__(self) -> None:
        if isinstance(self.grade, str):
            self.grade = Grade.parse(self.grade)
        if not self.steepness > 0:
            raise DomainError(f"steepness must be positive, got {self.steepness}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be at least 1")


# --------------------------------------------------------------------------
# gates


def phi0(x):
    """C0 exit probability ``min(1, |x|)``."""
    return smin(1.0, sabs(x))


def phi_inf(x, s: float = 2.0):
    """C-inf exit probability ``1 - sech(s*x)``."""
    return 1.0 - sech(x * s)


def phi_inf_reference(x: float, s: float) -> float:
    """``(e^{sx} - 1)^2 / (e^{2sx} + 1)``; algebraically equal to ``phi_inf``."""
    e = math.exp(s * x)
    return (e - 1.0) ** 2 / (e * e + 1.0)


def logistic(x, s: float = 1.0):
    return sigmoid(x * s)


def heaviside(x: float) -> float:
    return 0.0 if x < 0 else 1.0


def smoothstep(x):
    """C1 step ``3x^2 - 2x^3`` on [0, 1], 0 below and 1 above."""
    xv = float(x)
    if xv <= 0:
        return 0.0 * x
    if xv >= 1:
        return 0.0 * x + 1.0
    return x * x * (3.0 - 2.0 * x)


def smoothstep_as_printed(x):
    """``x^2 - 2x^3`` on [0, 1]; ends at -1, so it is not a step function."""
    xv = float(x)
    if xv <= 0:
        return 0.0 * x
    if xv >= 1:
        return 0.0 * x + 1.0
    return x * x * (1.0 - 2.0 * x)


# --------------------------------------------------------------------------
# execution


@dataclass
class LoopTrace:
    loop_id: int
    var: int
    iterations: list[int] = field(default_factory=list)
    final_p: list[float] = field(default_factory=list)
    truncated: int = 0
    # per execution, p of every iteration (only with SmoothConfig.record_p)
    p_history: list[list[float]] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {
            "loop": self.loop_id,
            "var": f"x{self.var}",
            "executions": len(self.iterations),
            "iterations": self.iterations,
            "final_p": self.final_p,
            "truncated": self.truncated,
        }
        if self.p_history:
            out["p_history"] = self.p_history
        return out


@dataclass
class SmoothRun:
    """Result of :func:`run_smooth`.

    ``env`` maps variable index to Scalar (floats for the discrete grade);
    ``inputs`` holds the lifted input Scalars the gradients refer to.
    """

    env: dict[int, Scalar | float]
    inputs: dict[int, Scalar]
    loops: list[LoopTrace]
    grade: Grade

    @property
    def x0(self) -> float:
        return self.value(0)

    def value(self, var: int = 0) -> float:
        v = self.env.get(var, 0.0)
        return v.value if isinstance(v, Scalar) else float(v)

    @property
    def truncated(self) -> bool:
        return any(lt.truncated for lt in self.loops)

    def gradients(self, var: int = 0) -> dict[int, float]:
        """d x_var / d x_i for every input i."""
        out = self.env.get(var)
        if not isinstance(out, Scalar):
            raise DomainError("gradients are only available for smooth grades")
        grads = backward(out)
        return {i: grads[x] for i, x in sorted(self.inputs.items())}

    def trace(self) -> dict:
        return {
            "grade": self.grade.value,
            "truncated": self.truncated,
            "loops": [lt.to_json() for lt in self.loops],
        }


class _Machine:
    def __init__(self, program, config, tape, calibration=None):
        self.config = config
        self.tape = tape
        self.env: dict[int, Scalar] = {}
        if config.grade is Grade.C0:
            self.phi = phi0
        else:
            s = config.steepness
            self.phi = lambda x: phi_inf(x, s)
        self.loop_ids = {id(w): i for i, w in enumerate(program.loops())}
        self.loops = [LoopTrace(i, w.cond) for i, w in enumerate(program.loops())]
        stmts = program.statements()
        self.stmt_ids = {id(s): i for i, s in enumerate(stmts)}
        if calibration is not None and len(calibration) != len(stmts):
            raise DomainError(
                f"calibration has {len(calibration)} entries, program has {len(stmts)} assignments"
            )
        self.calibration = calibration
        self.budget = config.max_total_iterations

    def get(self, var: int) -> Scalar:
        v = self.env.get(var)
        if v is None:
            v = self.env[var] = lift(0.0, self.tape)
        return v

    def _calibrated(self, stmt, smooth, crisp, p):
        # p*(w*crisp + b) + (1-p)*old == smooth + p*((w-1)*crisp + b); the
        # second form is exact when w=1, b=0.
        if self.calibration is None:
            return smooth
        w, b = self.calibration[self.stmt_ids[id(stmt)]]
        return smooth + p * ((w - 1.0) * crisp + b)

    def run(self, stmt: Statement, p) -> None:
        if isinstance(stmt, Seq):
            self.run(stmt.first, p)
            self.run(stmt.second, p)
        elif isinstance(stmt, Assign):
            old, src = self.get(stmt.dst), self.get(stmt.src)
            self.env[stmt.dst] = self._calibrated(stmt, p * src + (1.0 - p) * old, src, p)
        elif isinstance(stmt, Inc):
            old = self.get(stmt.var)
            self.env[stmt.var] = self._calibrated(stmt, old + p, old + 1.0, p)
        elif isinstance(stmt, Dec):
            old = self.get(stmt.var)
            self.env[stmt.var] = self._calibrated(stmt, old - p, old - 1.0, p)
        elif isinstance(stmt, While):
            self.loop(stmt, p)
        else:
            raise TypeError(f"not a statement: {stmt!r}")

    def loop(self, stmt: While, p) -> None:
        lt = self.loops[self.loop_ids[id(stmt)]]
        eps, cap = self.config.epsilon, self.config.max_iterations
        q = p
        n = 0
        history = [] if self.config.record_p else None
        while True:
            q = q * self.phi(self.get(stmt.cond))
            if history is not None:
                history.append(q.value)
            self.run(stmt.body, q)
            n += 1
            self.budget -= 1
            if q.value <= eps:
                break
            if n >= cap or self.budget <= 0:
                lt.truncated += 1
                break
        lt.iterations.append(n)
        lt.final_p.append(q.value)
        if history is not None:
            lt.p_history.append(history)


def run_smooth(
    program: Program,
    inputs: Mapping,
    config: SmoothConfig | None = None,
    *,
    tape: Tape | None = None,
    calibration: Sequence[tuple] | None = None,
) -> SmoothRun:
    """Run ``program`` under the grade in ``config``.

    Input values may be Scalars, in which case the run is recorded on
    their tape and gradients refer to them.  ``calibration`` overrides
    ``config.calibration`` and may hold Scalars on ``tape`` (used when
    fitting the calibration itself).
    """
    config = config or SmoothConfig()
    given = {k: v for k, v in inputs.items() if isinstance(v, Scalar)}
    bindings = parse_inputs({k: value_of(v) for k, v in inputs.items()})
    given = dict(zip(parse_inputs({k: 0.0 for k in given}), given.values()))
    for k, v in bindings.items():
        if not math.isfinite(v):
            raise DomainError(f"input x{k} is not finite")

    if config.grade is Grade.DISCRETE:
        env = run_discrete(program, bindings, config.discrete_cap)
        return SmoothRun(dict(env), {}, [], config.grade)

    tape = tape or tape_of(*given.values()) or Tape()
    if calibration is None:
        calibration = config.calibration
    m = _Machine(program, config, tape, calibration)
    inputs_lifted = {}
    for k, v in sorted(bindings.items()):
        inputs_lifted[k] = m.env[k] = given[k] if k in given else lift(v, tape)
    for k in sorted(program.variables() | {0}):
        m.get(k)
    m.run(program.root, lift(1.0, tape))
    return SmoothRun(m.env, inputs_lifted, m.loops, config.grade)


# --------------------------------------------------------------------------
# calibration


class CalibrationError(RuntimeError):
    def __init__(self, message: str, loss_history: list[float]) -> None:
        super().__init__(message)
        self.loss_history = loss_history


@dataclass
class Calibration:
    calibration: list[tuple[float, float]]
    loss_history: list[float]


def calibration_loss(program, dataset, config, params, tape, regularization):
    """Mean squared x0 error plus an L2 pull of weights to 1 and biases to 0."""
    pairs = [(params[2 * i], params[2 * i + 1]) for i in range(len(params) // 2)]
    total = 0.0
    for inputs, target in dataset:
        run = run_smooth(program, inputs, config, tape=tape, calibration=pairs)
        err = run.env[0] - float(target)
        total = err * err + total
    loss = total / len(dataset)
    for w, b in pairs:
        loss = loss + regularization * ((w - 1.0) * (w - 1.0) + b * b)
    return loss


def calibrate(
    program: Program,
    dataset: Sequence[tuple[Mapping, float]],
    config: SmoothConfig | None = None,
    *,
    steps: int = 500,
    lr: float = 1e-4,
    regularization: float = 1e-3,
    init: Sequence[tuple[float, float]] | None = None,
) -> Calibration:
    """Fit one (weight, bias) per assignment to integer input/output pairs.

    The dataset is typically produced by :func:`run_discrete`.  Uses Adam on
    the regularized mean squared error of x0.  ``loss_history[k]`` is the
    loss before step k; the final entry is the loss of the returned values.
    """
    if not dataset:
        raise ValueError("calibration needs a non-empty dataset")
    config = config or SmoothConfig()
    if config.grade is not Grade.C_INF:
        raise DomainError("calibration is defined for the c_inf grade")
    n = len(program.statements())
    theta = np.array(
        [v for pair in (init or [(1.0, 0.0)] * n) for v in pair], dtype=np.float64
    )
    if theta.size != 2 * n:
        raise DomainError("init must have one (weight, bias) per assignment")
    opt = Adam(theta.size, lr=lr)
    history: list[float] = []
    for step in range(steps + 1):
        tape = Tape()
        params = [lift(v, tape) for v in theta]
        loss = calibration_loss(program, dataset, config, params, tape, regularization)
        history.append(loss.value)
        if not math.isfinite(loss.value):
            raise CalibrationError(f"loss became non-finite at step {step}", history)
        if step == steps:
            break
        grads = backward(loss)
        theta = opt.step(theta, np.array(grads.of(params)))
    pairs = [(float(theta[2 * i]), float(theta[2 * i + 1])) for i in range(n)]
    return Calibration(pairs, history)
