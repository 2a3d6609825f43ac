import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothlang.autodiff import (
    DomainError,
    Tape,
    UsageError,
    backward,
    exp,
    gradcheck,
    lift,
    log,
    sabs,
    sech,
    sigmoid,
    smax,
    smin,
    tanh,
)
from smoothlang.interp import phi_inf


class TestLift:
    def test_values(self):
        t = Tape()
        assert lift(0, t).value == 0.0
        assert lift(3.5, t).value == 3.5

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(DomainError):
            lift(bad, Tape())


class TestBackward:
    def test_square(self):
        t = Tape()
        x = lift(3.0, t)
        assert backward(x * x)[x] == 6.0

    def test_sigmoid_at_zero(self):
        t = Tape()
        x = lift(0.0, t)
        assert backward(sigmoid(x))[x] == 0.25

    def test_product_rule(self):
        t = Tape()
        x, y = lift(2.0, t), lift(5.0, t)
        g = backward(x * y)
        assert (g[x], g[y]) == (5.0, 2.0)

    def test_reused_node_accumulates(self):
        t = Tape()
        x = lift(2.0, t)
        y = x * x + x * 3.0 - x / 2.0
        assert backward(y)[x] == pytest.approx(2 * 2.0 + 3.0 - 0.5)

    def test_constant_operands_both_sides(self):
        t = Tape()
        x = lift(4.0, t)
        assert backward(1.0 - x)[x] == -1.0
        assert backward(8.0 / x)[x] == pytest.approx(-0.5)
        assert backward(2.0 + x)[x] == 1.0
        assert backward(3.0 * x)[x] == 3.0

    def test_not_a_scalar(self):
        with pytest.raises(UsageError):
            backward(3.0)

    def test_mixed_tapes_rejected(self):
        a, b = lift(1.0, Tape()), lift(2.0, Tape())
        with pytest.raises(UsageError):
            a + b

    def test_gradient_of_foreign_value_rejected(self):
        t = Tape()
        x = lift(1.0, t)
        g = backward(x * 2.0)
        with pytest.raises(UsageError):
            g[lift(1.0, Tape())]

    def test_later_node_has_zero_gradient(self):
        t = Tape()
        x = lift(1.0, t)
        y = x * 2.0
        z = lift(5.0, t)
        assert backward(y)[z] == 0.0


class TestPrimitives:
    def test_abs_subgradient_at_zero(self):
        t = Tape()
        x = lift(0.0, t)
        assert backward(sabs(x))[x] == 0.0

    def test_min_max_route_adjoint(self):
        t = Tape()
        a, b = lift(1.0, t), lift(2.0, t)
        g = backward(smin(a, b))
        assert (g[a], g[b]) == (1.0, 0.0)
        g = backward(smax(a, b))
        assert (g[a], g[b]) == (0.0, 1.0)

    def test_sech_clamp(self):
        t = Tape()
        x = lift(800.0, t)
        y = sech(x)
        assert y.value == 0.0
        assert backward(y)[x] == 0.0
        assert phi_inf(x, 1.0).value == 1.0

    def test_sech_matches_cosh(self):
        for v in (-3.0, -0.2, 0.0, 1.7, 650.0):
            assert sech(v) == pytest.approx(1.0 / math.cosh(v), rel=1e-14, abs=1e-300)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            log(lift(0.0, Tape()))

    def test_floats_pass_through(self):
        assert exp(0.0) == 1.0
        assert sigmoid(0.0) == 0.5
        assert tanh(0.0) == 0.0


class TestGradcheck:
    def test_exp(self):
        rep = gradcheck(lambda xs: exp(xs[0]), [1.0], h=1e-5, tol=1e-5)
        assert rep.passed, rep

    def test_phi_inf(self):
        rep = gradcheck(lambda xs: phi_inf(xs[0], 2.0), [0.5], h=1e-5, tol=1e-5)
        assert rep.passed, rep

    def test_kinks(self):
        rep = gradcheck(lambda xs: sabs(xs[0]), [0.0], h=1e-5, tol=1e-5)
        assert rep.analytic == [0.0]
        assert rep.numeric == [0.0]
        # one-sided slope 1 against a central estimate of 0.5
        rep = gradcheck(lambda xs: smax(xs[0], 0.0), [0.0], h=1e-5, tol=1e-5)
        assert not rep.passed

    def test_non_finite_reported_not_raised(self):
        rep = gradcheck(lambda xs: exp(xs[0] * 1000.0), [1.0])
        assert not rep.passed
        assert rep.problems

    def test_bad_step(self):
        with pytest.raises(DomainError):
            gradcheck(lambda xs: xs[0], [1.0], h=0.0)


UNARY = {
    "exp": (exp, (-3.0, 3.0)),
    "log": (log, (0.1, 5.0)),
    "tanh": (tanh, (-3.0, 3.0)),
    "sech": (sech, (-5.0, 5.0)),
    "sigmoid": (sigmoid, (-8.0, 8.0)),
    "abs": (sabs, (0.05, 3.0)),
    "square": (lambda x: x * x, (-3.0, 3.0)),
    "recip": (lambda x: 1.0 / x, (0.2, 3.0)),
    "pow": (lambda x: x**3.0, (-2.0, 2.0)),
}


@pytest.mark.parametrize("seed,name", list(enumerate(sorted(UNARY))))
def test_primitive_gradients_random_points(seed, name):
    fn, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(seed)
    for v in rng.uniform(lo, hi, size=20):
        rep = gradcheck(lambda xs: fn(xs[0]), [v], h=1e-5, tol=1e-5)
        assert rep.passed, (name, v, rep)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / b,
        lambda a, b: smin(a, b),
        lambda a, b: smax(a, b),
    ],
)
def test_binary_gradients(fn):
    rng = np.random.default_rng(7)
    for a, b in rng.uniform(0.5, 3.0, size=(20, 2)):
        if abs(a - b) < 1e-3:
            continue
        rep = gradcheck(lambda xs: fn(xs[0], xs[1]), [a, b], h=1e-5, tol=1e-5)
        assert rep.passed


def _composite(xs):
    x, y = xs
    return tanh(x * y) + exp(-x) * sech(y) / (1.0 + x * x)


class TestTapeProperties:
    def test_replay_is_bit_identical(self):
        t = Tape()
        xs = [lift(0.3, t), lift(-1.2, t)]
        out = _composite(xs)
        assert t.replay() == t.values
        assert t.replay()[out.idx] == out.value

    def test_replay_with_new_inputs_matches_fresh_evaluation(self):
        t = Tape()
        xs = [lift(0.3, t), lift(-1.2, t)]
        out = _composite(xs)
        vals = t.replay({xs[0].idx: 0.7, xs[1].idx: 0.1})
        t2 = Tape()
        assert vals[out.idx] == _composite([lift(0.7, t2), lift(0.1, t2)]).value

    def test_repeat_evaluation_deterministic(self):
        def run():
            t = Tape()
            return _composite([lift(0.3, t), lift(-1.2, t)]).value

        assert run() == run()

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(-2, 2),
        st.floats(-2, 2),
        st.floats(-3, 3),
        st.floats(-3, 3),
    )
    def test_adjoint_linearity(self, x, y, a, b):
        t = Tape()
        xs = [lift(x, t), lift(y, t)]
        f = _composite(xs)
        g = exp(xs[0]) * xs[1]
        combo = backward(f * a + g * b).of(xs)
        gf, gg = backward(f).of(xs), backward(g).of(xs)
        for c, u, v in zip(combo, gf, gg):
            expected = a * u + b * v
            assert abs(c - expected) <= 1e-12 * max(1.0, abs(expected))
