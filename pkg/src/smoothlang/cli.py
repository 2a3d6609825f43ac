"""Command-line interface.

Results go to stdout as JSON, diagnostics to stderr.  Exit codes are the
same for every subcommand: 0 success, 1 parse or usage error, 2 runtime or
domain error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import smooth_ifs as ifs
from . import smooth_ops as ops
from .autodiff import DomainError, exp, gradcheck, value_of
from .interp import Grade, SmoothConfig, phi0, phi_inf, run_smooth
from .while_lang import (
    DEFAULT_ITERATION_CAP,
    NonTermination,
    ParseError,
    format_program,
    parse,
    parse_inputs,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MAX_ITERS_ENV = "SMOOTHLANG_MAX_ITERS"


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# output


def _num(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        return json.dumps(None) if math.isnan(v) else ('"inf"' if v > 0 else '"-inf"')
    return format(v, ".17g")


def to_json(obj) -> str:
    """JSON with floats printed to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)) or hasattr(obj, "tape"):
        return _num(value_of(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def emit(obj) -> None:
    sys.stdout.write(to_json(obj) + "\n")


def _vector(text: str, what: str = "vector") -> list[float]:
    try:
        v = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageFailure(f"malformed JSON {what}: {exc}") from None
    if not isinstance(v, list) or not all(
        isinstance(e, (int, float)) and not isinstance(e, bool) for e in v
    ):
        raise UsageFailure(f"{what} must be a JSON array of numbers")
    return [float(e) for e in v]


def _array(text: str) -> np.ndarray:
    try:
        arr = np.asarray(json.loads(text), dtype=np.float64)
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageFailure(f"malformed JSON array: {exc}") from None
    return arr


def _bindings(pairs) -> dict[int, float]:
    out = {}
    for item in pairs or []:
        for part in item.split(","):
            name, sep, value = part.partition("=")
            if not sep:
                raise UsageFailure(f"invalid binding {part!r}; expected xN=value")
            try:
                out.update(parse_inputs({name.strip(): float(value)}))
            except ValueError as exc:
                raise UsageFailure(f"invalid binding {part!r}: {exc}") from None
    return out


def _default_max_iters(fallback: int) -> int:
    raw = os.environ.get(MAX_ITERS_ENV)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise UsageFailure(f"{MAX_ITERS_ENV} must be an integer, got {raw!r}") from None


def _load_program(path: str):
    p = Path(path)
    if not p.is_file():
        raise UsageFailure(f"{path}: no such file")
    try:
        return parse(p.read_text())
    except ParseError as exc:
        raise UsageFailure(f"{path}:{exc.line}:{exc.column}: {exc.message}") from None


def _config(args, grade: Grade) -> SmoothConfig:
    cap = args.max_iters
    kw = {}
    if grade is Grade.DISCRETE:
        kw["discrete_cap"] = cap if cap is not None else _default_max_iters(DEFAULT_ITERATION_CAP)
    else:
        kw["max_iterations"] = cap if cap is not None else _default_max_iters(10_000)
    return SmoothConfig(grade=grade, steepness=args.s, epsilon=args.eps, **kw)


# --------------------------------------------------------------------------
# commands


def cmd_parse(args) -> int:
    program = _load_program(args.program)
    emit(
        {
            "ok": True,
            "statements": len(program.statements()),
            "loops": len(program.loops()),
            "variables": [f"x{i}" for i in sorted(program.variables())],
            "formatted": format_program(program),
        }
    )
    return EXIT_OK


def cmd_run(args) -> int:
    program = _load_program(args.program)
    grade = Grade.parse(args.mode)
    inputs = _bindings(args.input)
    config = _config(args, grade)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run = run_smooth(program, inputs, config)
    out = {"mode": grade.value, "x0": run.x0}
    if args.dump_env:
        out["env"] = {f"x{k}": run.value(k) for k in sorted(run.env)}
    if args.grad:
        if grade is Grade.DISCRETE:
            raise UsageFailure("--grad needs a smooth mode (c0 or cinf)")
        out["gradients"] = {f"dx0/dx{k}": g for k, g in run.gradients().items()}
    out["trace"] = run.trace()
    emit(out)
    return EXIT_OK


def _projection(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed + 1).normal(size=n)


def _op_target(name: str, args):
    """(scalar function of a list of Scalars, default point, note)."""
    rng = np.random.default_rng(args.seed)
    n, s = args.n, args.s
    proj = _projection(n, args.seed)

    def dot(vec):
        return sum(float(c) * v for c, v in zip(proj, vec))

    weights = list(rng.uniform(0.2, 1.0, size=n))
    targets = {
        "exp": (lambda xs: exp(xs[0]), [1.0]),
        "phi0": (lambda xs: phi0(xs[0]), [0.5]),
        "phi_inf": (lambda xs: phi_inf(xs[0], s), [0.5]),
        "softsort": (lambda xs: dot(ops.soft_sort(xs, s).sorted), list(rng.normal(size=n))),
        "wsoftmax": (lambda xs: dot(ops.w_softmax(xs, weights)), list(rng.normal(size=n))),
        "wsoftmin": (lambda xs: dot(ops.w_softmin(xs, weights)), list(rng.normal(size=n))),
        "median-precise": (lambda xs: ops.soft_median_precise(xs, s), list(rng.normal(size=n))),
        "median-fast": (
            lambda xs: ops.soft_median_fast(xs, args.degree, s),
            list(rng.normal(size=n)),
        ),
        "fdiff": (
            lambda xs: dot(list(ops.finite_differences(xs, normalize=True, pad=True))),
            list(rng.normal(size=n)),
        ),
    }
    if name not in targets:
        raise UsageFailure(
            f"unknown gradcheck target {name!r}; expected a .while file or one of "
            + ", ".join(sorted(targets))
        )
    return targets[name]


def cmd_gradcheck(args) -> int:
    notes = []
    target = args.target
    if target.endswith(".while") or Path(target).is_file():
        program = _load_program(target)
        grade = Grade.parse(args.mode)
        if grade is Grade.DISCRETE:
            raise UsageFailure("gradcheck needs a smooth mode")
        bindings = _bindings([args.point] if args.point else [])
        if not bindings:
            raise UsageFailure("gradcheck of a program needs --point xN=value,...")
        names = sorted(bindings)
        config = _config(args, grade)

        def f(xs):
            return run_smooth(program, dict(zip(names, xs)), config).env[0]

        point = [bindings[k] for k in names]
        labels = [f"x{k}" for k in names]
    else:
        f, point = _op_target(target, args)
        if args.point:
            point = [float(v) for v in args.point.split(",")]
        labels = [f"x{i}" for i in range(len(point))]
        if target == "phi0" and any(abs(v) in (0.0, 1.0) for v in point):
            notes.append("phi0 has kinks at 0 and +-1; derivative there is a subgradient choice")
    report = gradcheck(f, point, h=args.h, tol=args.tol)
    informational = bool(notes)
    out = {
        "target": target,
        "point": dict(zip(labels, point)),
        "analytic": dict(zip(labels, report.analytic)),
        "numeric": dict(zip(labels, report.numeric)),
        "errors": dict(zip(labels, report.errors)),
        "max_error": report.max_error,
        "tol": args.tol,
        "passed": report.passed,
        "informational": informational,
        "notes": notes + report.problems,
    }
    emit(out)
    return EXIT_OK if report.passed or informational else EXIT_RUNTIME


def cmd_sort(args) -> int:
    a = _vector(args.vector)
    comp = _vector(args.companion, "companion") if args.companion else None
    res = ops.soft_sort(a, args.s, comp, args.stages, args.descending)
    out = {"input": a, "s": args.s, "sorted": res.sorted}
    if comp is not None:
        out["companion"] = res.companion
    if args.matrix:
        out["relaxation_matrix"] = res.relaxation_matrix
    emit(out)
    return EXIT_OK


def cmd_median(args) -> int:
    x = _vector(args.vector)
    if args.method == "precise":
        value = ops.soft_median_precise(x, args.s)
    else:
        value = ops.soft_median_fast(x, args.degree, args.s)
    emit({"input": x, "method": args.method, "s": args.s, "median": value})
    return EXIT_OK


def _weighted(args, fn) -> int:
    x = _vector(args.vector)
    w = _vector(args.w, "weights") if args.w else [1.0] * len(x)
    emit({"input": x, "weights": w, "output": fn(x, w)})
    return EXIT_OK


def cmd_wsoftmax(args) -> int:
    return _weighted(args, ops.w_softmax)


def cmd_wsoftmin(args) -> int:
    return _weighted(args, ops.w_softmin)


def cmd_fdiff(args) -> int:
    x = _array(args.vector)
    out = ops.finite_differences(x, args.axis, args.normalize, args.pad)
    emit({"input": x, "axis": args.axis, "output": out})
    return EXIT_OK


def _load_ifs(path: str) -> ifs.IfsModel:
    p = Path(path)
    if not p.is_file():
        raise UsageFailure(f"{path}: no such file")
    try:
        return ifs.IfsModel.from_json(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageFailure(f"{path}: invalid model file: {exc}") from None


def cmd_ifs_sample(args) -> int:
    w = _vector(args.weights, "weights") if args.weights else None
    choices = ifs.sample_choices(args.n, args.T, args.seed, w)
    emit({"n": args.n, "T": args.T, "seed": args.seed, "choices": choices})
    return EXIT_OK


def cmd_ifs_render(args) -> int:
    model = _load_ifs(args.model)
    sigma = model.sigma if args.sigma is None else args.sigma
    pts, truncated = ifs.iterate_array(model.params, model.choices, model.initial_point)
    if args.crisp:
        image = ifs.render_crisp(model)
    else:
        image = ifs.rasterize_array(pts, sigma, model.canvas)
    ifs.write_pgm(args.out, image)
    emit(
        {
            "output": str(args.out),
            "width": model.canvas.width,
            "height": model.canvas.height,
            "sigma": sigma,
            "points": len(pts),
            "truncated": truncated,
            "mean": float(image.mean()),
        }
    )
    return EXIT_OK


def cmd_ifs_fit(args) -> int:
    model = _load_ifs(args.model)
    tp = Path(args.target)
    if not tp.is_file():
        raise UsageFailure(f"{args.target}: no such file")
    target = ifs.read_pgm(tp)
    if target.shape != (model.canvas.height, model.canvas.width):
        raise UsageFailure(
            f"target is {target.shape[1]}x{target.shape[0]}, canvas is "
            f"{model.canvas.width}x{model.canvas.height}"
        )
    schedule = (
        [float(v) for v in args.schedule.split(",")] if args.schedule else [model.sigma]
    )
    result = ifs.fit(model, target, schedule, args.steps, lr=args.lr)
    last = schedule[-1]
    initial = ifs.ifs_loss_and_grad(model, model.params, target, last)[0]
    final = ifs.ifs_loss_and_grad(model, result.model.params, target, last)[0]
    ifs.save_model(args.out, result.model)
    history = args.history or str(Path(args.out).with_suffix(".csv"))
    with open(history, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sigma", "loss"])
        for k, (s, loss) in enumerate(zip(result.sigma_history, result.loss_history)):
            w.writerow([k, format(s, ".17g"), format(loss, ".17g")])
    emit(
        {
            "model": str(args.out),
            "history": history,
            "steps": len(result.loss_history),
            "schedule": schedule,
            "initial_loss": initial,
            "final_loss": final,
            "ratio": final / initial if initial > 0 else 0.0,
        }
    )
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="smoothlang",
        description="Smooth interpretation of WHILE programs and differentiable primitives.",
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def smooth_flags(sp):
        sp.add_argument("--mode", default="cinf", help="discrete, c0 or cinf")
        sp.add_argument("--s", type=float, default=2.0, help="steepness")
        sp.add_argument("--eps", type=float, default=1e-7, help="loop exit threshold")
        sp.add_argument("--max-iters", type=int, default=None)

    sp = sub.add_parser("parse", help="check and pretty-print a program")
    sp.add_argument("program")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("run", help="execute a program")
    sp.add_argument("program")
    sp.add_argument("-i", "--input", action="append", metavar="xN=VALUE")
    smooth_flags(sp)
    sp.add_argument("--grad", action="store_true", help="report d x0 / d inputs")
    sp.add_argument("--dump-env", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("gradcheck", help="autodiff vs central differences")
    sp.add_argument("target", help="op name or .while file")
    sp.add_argument("--point", help="comma-separated values or xN=value pairs")
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--degree", type=int, default=2)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    smooth_flags(sp)
    sp.set_defaults(func=cmd_gradcheck, s=None)

    sp = sub.add_parser("sort", help="SoftSort a JSON vector")
    sp.add_argument("vector")
    sp.add_argument("--s", type=float, default=1.0)
    sp.add_argument("--companion")
    sp.add_argument("--stages", type=int)
    sp.add_argument("--descending", action="store_true")
    sp.add_argument("--matrix", action="store_true", help="include the relaxation matrix")
    sp.set_defaults(func=cmd_sort)

    sp = sub.add_parser("median", help="SoftMedian of a JSON vector")
    sp.add_argument("vector")
    sp.add_argument("--s", type=float, default=1.0)
    sp.add_argument("--method", choices=["precise", "fast"], default="precise")
    sp.add_argument("--degree", type=int, default=2)
    sp.set_defaults(func=cmd_median)

    for name, fn in (("wsoftmax", cmd_wsoftmax), ("wsoftmin", cmd_wsoftmin)):
        sp = sub.add_parser(name, help=f"weighted {name[1:]}")
        sp.add_argument("vector")
        sp.add_argument("--w", help="JSON weights in (0, 1]")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("fdiff", help="finite differences of a JSON array")
    sp.add_argument("vector")
    sp.add_argument("--axis", type=int, default=0)
    sp.add_argument("--normalize", action="store_true")
    sp.add_argument("--pad", action="store_true")
    sp.set_defaults(func=cmd_fdiff)

    sp = sub.add_parser("ifs-sample", help="pre-sample an IFS choice sequence")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--weights")
    sp.set_defaults(func=cmd_ifs_sample)

    sp = sub.add_parser("ifs-render", help="render an IFS model to a P2 graymap")
    sp.add_argument("model")
    sp.add_argument("out")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--crisp", action="store_true", help="classic non-smooth raster")
    sp.set_defaults(func=cmd_ifs_render)

    sp = sub.add_parser("ifs-fit", help="fit IFS parameters to a target image")
    sp.add_argument("model")
    sp.add_argument("target")
    sp.add_argument("--schedule", help="comma-separated sigmas, coarse to fine")
    sp.add_argument("--steps", type=int, default=300, help="steps per sigma level")
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--out", required=True, help="fitted model JSON")
    sp.add_argument("--history", help="loss CSV (default: next to --out)")
    sp.set_defaults(func=cmd_ifs_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "s", 0) is None:
        # gradcheck: steepness defaults depend on the target
        args.s = 1.0 if not args.target.endswith(".while") else 2.0
    try:
        return args.func(args)
    except UsageFailure as exc:
        print(f"smoothlang: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, NonTermination, ifs.FitError, ValueError, ArithmeticError) as exc:
        print(f"smoothlang: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
