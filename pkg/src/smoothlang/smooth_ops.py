"""Smooth algorithmic primitives.

All functions accept plain floats or :class:`~smoothlang.autodiff.Scalar`
values; with Scalars the results stay on the caller's tape and can be
differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DomainError, Scalar, exp, log, sigmoid, value_of


@dataclass
class SortResult:
    sorted: list
    relaxation_matrix: np.ndarray
    # per stage: swap probability applied to each pair (i, i+1), keyed by i
    exchange_probabilities: list[dict[int, float]] = field(default_factory=list)
    companion: list | None = None


def default_stages(n: int) -> int:
    """Stages needed for a full odd-even transposition sort of ``n`` items."""
    # odd-even transposition sort needs n rounds for every input order
    return n if n > 1 else 0


def stage_pairs(n: int, stage: int) -> range:
    """Left indices of the pairs exchanged in ``stage`` (0-based)."""
    return range(stage % 2, n - 1, 2)


def _mix(u, v, e):
    return u + e * (v - u), v - e * (v - u)


def soft_sort(
    a: Sequence,
    s: float = 1.0,
    companion: Sequence | None = None,
    num_stages: int | None = None,
    descending: bool = False,
) -> SortResult:
    """Differentiable odd-even transposition sort.

    Each stage mixes the pairs ``(i, i+1)`` as

        a_i' = (1 - e) a_i + e a_{i+1}
        a_{i+1}' = e a_i + (1 - e) a_{i+1}

    with swap probability ``e = sigmoid((a_i - a_{i+1}) * s)``, so large
    ``s`` yields ascending order.  The stage matrices compose into a doubly
    stochastic ``relaxation_matrix`` M with ``sorted = a @ M``; ``companion``
    is mixed with the same probabilities, i.e. ``companion @ M``.
    """
    n = len(a)
    if n == 0:
        raise DomainError("cannot sort an empty vector")
    if not s > 0:
        raise DomainError("steepness must be positive")
    if companion is not None and len(companion) != n:
        raise DomainError(f"companion has length {len(companion)}, expected {n}")
    stages = default_stages(n) if num_stages is None else int(num_stages)
    if stages < 0:
        raise DomainError("num_stages must be non-negative")
    sign = -1.0 if descending else 1.0

    vals = list(a)
    comp = list(companion) if companion is not None else None
    matrix = np.eye(n)
    probs: list[dict[int, float]] = []
    for stage in range(stages):
        stage_probs = {}
        for i in stage_pairs(n, stage):
            e = sigmoid((vals[i] - vals[i + 1]) * (sign * s))
            vals[i], vals[i + 1] = _mix(vals[i], vals[i + 1], e)
            if comp is not None:
                comp[i], comp[i + 1] = _mix(comp[i], comp[i + 1], e)
            ev = value_of(e)
            stage_probs[i] = ev
            ci, cj = matrix[:, i].copy(), matrix[:, i + 1].copy()
            matrix[:, i] = (1.0 - ev) * ci + ev * cj
            matrix[:, i + 1] = ev * ci + (1.0 - ev) * cj
        probs.append(stage_probs)
    return SortResult(vals, matrix, probs, comp)


def _logsumexp(z: list):
    m = max(value_of(v) for v in z)
    total = sum(exp(v - m) for v in z)
    return log(total) + m


def _log_softmax(z: list) -> list:
    lse = _logsumexp(z)
    return [v - lse for v in z]


def softmax(x: Sequence) -> list:
    return [exp(v) for v in _log_softmax(list(x))]


def _check_weights(x: Sequence, w: Sequence) -> None:
    if len(x) != len(w):
        raise DomainError(f"length mismatch: {len(x)} values, {len(w)} weights")
    if not x:
        raise DomainError("empty input")
    for wi in w:
        wv = value_of(wi)
        if not (0.0 < wv <= 1.0):
            raise DomainError(f"weights must lie in (0, 1], got {wv!r}")


def w_softmax(x: Sequence, w: Sequence) -> list:
    """SoftMax of ``x`` restricted by inclusion weights ``w`` in (0, 1].

    Computed as ``softmax(x + log w)`` with max-subtraction.
    """
    _check_weights(x, w)
    return [exp(v) for v in _log_softmax([xi + log(wi) for xi, wi in zip(x, w)])]


def w_softmax_direct(x: Sequence, w: Sequence) -> list:
    """``exp(x_i) w_i / sum_j exp(x_j) w_j`` evaluated as written.

    Overflows for large ``x``; kept as the reference form.
    """
    _check_weights(x, w)
    terms = [exp(xi) * wi for xi, wi in zip(x, w)]
    total = sum(terms)
    return [t / total for t in terms]


def w_softmin(x: Sequence, w: Sequence) -> list:
    return w_softmax([-xi for xi in x], w)


def soft_median_precise(x: Sequence, s: float = 1.0) -> Scalar | float:
    """Middle value of ``soft_sort(x, s)`` (mean of the two middles for even n).

    Only the exchanges that can reach the middle position(s) are evaluated.
    """
    n = len(x)
    if n == 0:
        raise DomainError("median of an empty vector")
    if n == 1:
        return x[0]
    stages = default_stages(n)
    middle = {n // 2} if n % 2 else {n // 2 - 1, n // 2}

    # needed[k]: positions whose value after stage k feeds the middle
    needed = [set() for _ in range(stages)]
    needed[-1] = set(middle)
    for k in range(stages - 1, 0, -1):
        need = set(needed[k])
        for i in stage_pairs(n, k):
            if i in need or i + 1 in need:
                need.update((i, i + 1))
        needed[k - 1] = need

    vals = list(x)
    for k in range(stages):
        for i in stage_pairs(n, k):
            if i in needed[k] or i + 1 in needed[k]:
                e = sigmoid((vals[i] - vals[i + 1]) * s)
                vals[i], vals[i + 1] = _mix(vals[i], vals[i + 1], e)
    if n % 2:
        return vals[n // 2]
    return (vals[n // 2 - 1] + vals[n // 2]) * 0.5


def soft_median_weights(x: Sequence, degree: int = 2, s: float = 1.0) -> list:
    """Log-weights after ``degree`` rounds of down-weighting the extremes.

    Round j turns the weights w of round j-1 into

        wSoftMin(wSoftMin(s*x, w) + wSoftMax(s*x, w) scaled by s, w)

    starting from all-ones weights.  Everything is carried in log space so
    weights never underflow to an invalid 0.
    """
    n = len(x)
    if n == 0:
        raise DomainError("median of an empty vector")
    if degree < 1:
        raise DomainError("degree must be at least 1")
    logw = [0.0] * n
    for _ in range(degree):
        p_min = [exp(v) for v in _log_softmax([-s * xi + lw for xi, lw in zip(x, logw)])]
        p_max = [exp(v) for v in _log_softmax([s * xi + lw for xi, lw in zip(x, logw)])]
        extremeness = [a + b for a, b in zip(p_min, p_max)]
        logw = _log_softmax([-s * v + lw for v, lw in zip(extremeness, logw)])
    return logw


def soft_median_fast(x: Sequence, degree: int = 2, s: float = 1.0) -> Scalar | float:
    """Recursive SoftMedian of the given degree, read out as ``sum p_i x_i``."""
    logw = soft_median_weights(x, degree, s)
    return sum(exp(lw) * xi for lw, xi in zip(logw, x))


def finite_differences(x, axis: int = 0, normalize: bool = False, pad: bool = False) -> np.ndarray:
    """Forward differences ``x[i+1] - x[i]`` along ``axis``.

    ``normalize`` shifts the result to zero mean; ``pad`` appends a trailing
    zero slice so the output keeps the input shape.  Object arrays of
    Scalars are supported and stay differentiable.
    """
    arr = np.asarray(x, dtype=object if _has_scalars(x) else np.float64)
    if arr.ndim == 0:
        raise DomainError("finite differences need at least one dimension")
    if not -arr.ndim <= axis < arr.ndim:
        raise DomainError(f"axis {axis} out of range for {arr.ndim}-d input")
    if arr.shape[axis] < 2:
        raise DomainError("extent along axis must be at least 2")
    hi = np.take(arr, range(1, arr.shape[axis]), axis=axis)
    lo = np.take(arr, range(0, arr.shape[axis] - 1), axis=axis)
    out = hi - lo
    if normalize:
        out = out - out.sum() * (1.0 / out.size)
    if pad:
        shape = list(out.shape)
        shape[axis] = 1
        zeros = np.zeros(shape, dtype=out.dtype)
        if out.dtype == object:
            zeros[...] = 0.0
        out = np.concatenate([out, zeros], axis=axis)
    return out


def _has_scalars(x) -> bool:
    if isinstance(x, Scalar):
        return True
    if isinstance(x, np.ndarray):
        return x.dtype == object
    if isinstance(x, (list, tuple)):
        return any(_has_scalars(v) for v in x)
    return False


def crisp_median(x: Sequence[float]) -> float:
    xs = sorted(float(v) for v in x)
    n = len(xs)
    return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])
