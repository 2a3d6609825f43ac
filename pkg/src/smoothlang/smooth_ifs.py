"""Smooth iterated function systems.

A model holds ``n`` maps, each given by six parameters::

    f(x, y) = (x + a1 + a2*x + a3*y,  y + a4 + a5*x + a6*y)

and a choice sequence fixed in advance, so generating the point cloud is a
deterministic, differentiable function of the parameters.  Rasterization
gives each point a Gaussian footprint; a pixel's value is the probability
that at least one point falls into it, ``1 - prod_t (1 - q_t)``.

Two evaluation paths exist: one on autodiff Scalars (small problems,
gradient checks) and a vectorized numpy path with hand-written adjoints
used by :func:`fit`.  The tests keep the two in agreement.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DomainError, Scalar, Tape, backward, exp, lift, smin, value_of
from .optim import Adam

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
FOOTPRINT_RADIUS = 4.0  # in units of sigma
Q_MAX = 1.0 - 1e-9


@dataclass(frozen=True)
class Canvas:
    width: int = 32
    height: int = 32
    # world window mapped onto the full canvas; y points up
    xmin: float = -1.0
    xmax: float = 1.0
    ymin: float = -1.0
    ymax: float = 1.0

    @property
    def scale(self) -> tuple[float, float]:
        """Pixels per world unit along x and y (y is flipped)."""
        return (self.width / (self.xmax - self.xmin), -self.height / (self.ymax - self.ymin))

    def to_pixel(self, x, y):
        sx, sy = self.scale
        return (x - self.xmin) * sx, (y - self.ymax) * sy

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "window": [self.xmin, self.xmax, self.ymin, self.ymax],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Canvas":
        window = d.get("window", [-1.0, 1.0, -1.0, 1.0])
        return cls(int(d["width"]), int(d["height"]), *map(float, window))


def sample_choices(
    n: int, T: int, seed: int, weights: Sequence[float] | None = None
) -> np.ndarray:
    """Pre-committed map indices, deterministic in ``seed``."""
    if n < 1 or T < 1:
        raise DomainError("need n >= 1 maps and T >= 1 steps")
    if n == 1:
        return np.zeros(T, dtype=np.int64)
    p = None
    if weights is not None:
        p = np.asarray(weights, dtype=np.float64)
        if p.shape != (n,) or np.any(p < 0):
            raise DomainError("weights must be n non-negative probabilities")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"weights sum to {p.sum()!r}, not 1")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=T, p=p).astype(np.int64)


@dataclass
class IfsModel:
    params: np.ndarray  # (n, 6)
    choices: np.ndarray  # (T,)
    initial_point: tuple[float, float] = (0.0, 0.0)
    sigma: float = 1.0
    canvas: Canvas = field(default_factory=Canvas)
    seed: int | None = None
    weights: list[float] | None = None

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1, 6)
        self.choices = np.asarray(self.choices, dtype=np.int64).ravel()
        if len(self.params) < 1 or len(self.choices) < 1:
            raise DomainError("need at least one map and one step")
        if self.choices.min() < 0 or self.choices.max() >= len(self.params):
            raise DomainError("choice sequence refers to a missing map")
        if not np.all(np.isfinite(self.params)):
            raise DomainError("parameters must be finite")

    @property
    def n(self) -> int:
        return len(self.params)

    @property
    def T(self) -> int:
        return len(self.choices)

    @classmethod
    def create(cls, params, T: int, seed: int, weights=None, **kw) -> "IfsModel":
        params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
        choices = sample_choices(len(params), T, seed, weights)
        w = None if weights is None else [float(v) for v in weights]
        return cls(params, choices, seed=seed, weights=w, **kw)

    def with_params(self, params) -> "IfsModel":
        return replace(self, params=np.array(params, dtype=np.float64).reshape(-1, 6))

    def to_json(self) -> dict:
        if self.seed is None:
            raise DomainError("only seeded models can be saved (choices derive from the seed)")
        d = {
            "n": self.n,
            "params": [float(v) for v in self.params.ravel()],
            "T": self.T,
            "seed": self.seed,
            "sigma": self.sigma,
            "canvas": self.canvas.to_json(),
            "initial_point": list(map(float, self.initial_point)),
        }
        if self.weights is not None:
            d["weights"] = self.weights
        return d

    @classmethod
    def from_json(cls, d: dict) -> "IfsModel":
        n = int(d["n"])
        params = np.asarray(d["params"], dtype=np.float64)
        if params.size != 6 * n:
            raise DomainError(f"expected {6 * n} parameters, got {params.size}")
        return cls.create(
            params,
            int(d["T"]),
            int(d["seed"]),
            d.get("weights"),
            sigma=float(d.get("sigma", 1.0)),
            canvas=Canvas.from_json(d["canvas"]) if "canvas" in d else Canvas(),
            initial_point=tuple(map(float, d.get("initial_point", (0.0, 0.0)))),
        )


def barnsley_fern() -> tuple[np.ndarray, list[float], Canvas]:
    """Barnsley's fern as (params, map probabilities, a fitting window)."""
    # (a, b, c, d, e, f) of x' = a x + b y + e, y' = c x + d y + f
    classic = [
        (0.0, 0.0, 0.0, 0.16, 0.0, 0.0),
        (0.85, 0.04, -0.04, 0.85, 0.0, 1.6),
        (0.2, -0.26, 0.23, 0.22, 0.0, 1.6),
        (-0.15, 0.28, 0.26, 0.24, 0.0, 0.44),
    ]
    params = np.array([(e, a - 1.0, b, f, c, d - 1.0) for a, b, c, d, e, f in classic])
    return params, [0.01, 0.85, 0.07, 0.07], Canvas(32, 32, -3.0, 3.0, -0.5, 10.5)


# --------------------------------------------------------------------------
# point generation


@dataclass
class PointCloud:
    xs: list
    ys: list
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.xs)

    def values(self) -> np.ndarray:
        return np.array([[value_of(x), value_of(y)] for x, y in zip(self.xs, self.ys)]).reshape(
            -1, 2
        )


def iterate(model: IfsModel, params=None, initial_point=None) -> PointCloud:
    """Apply the pre-committed maps; point t is f_{c_t}(point t-1).

    ``params`` may be an (n, 6) nested sequence of Scalars.  The cloud
    holds the T generated points (not the initial point) and is cut short,
    with ``truncated`` set, at the first coordinate beyond 1e6.
    """
    p = model.params if params is None else params
    x, y = model.initial_point if initial_point is None else initial_point
    xs, ys = [], []
    for c in model.choices:
        a1, a2, a3, a4, a5, a6 = p[c]
        x, y = x + a1 + a2 * x + a3 * y, y + a4 + a5 * x + a6 * y
        if abs(value_of(x)) > DIVERGENCE_LIMIT or abs(value_of(y)) > DIVERGENCE_LIMIT:
            return PointCloud(xs, ys, truncated=True)
        xs.append(x)
        ys.append(y)
    return PointCloud(xs, ys)


def iterate_array(params: np.ndarray, choices: np.ndarray, initial_point) -> tuple[np.ndarray, bool]:
    """Vectorized-storage twin of :func:`iterate`; returns (T', 2) points."""
    params = np.asarray(params, dtype=np.float64)
    pts = np.empty((len(choices), 2))
    x, y = map(float, initial_point)
    for t, c in enumerate(choices):
        a1, a2, a3, a4, a5, a6 = params[c]
        x, y = x + a1 + a2 * x + a3 * y, y + a4 + a5 * x + a6 * y
        if abs(x) > DIVERGENCE_LIMIT or abs(y) > DIVERGENCE_LIMIT or not (
            math.isfinite(x) and math.isfinite(y)
        ):
            return pts[:t], True
        pts[t] = x, y
    return pts, False


# --------------------------------------------------------------------------
# rasterization


def _footprint_scale(sigma: float) -> float:
    # Gaussian density at the pixel centre times the unit pixel area
    return 1.0 / (2.0 * math.pi * sigma * sigma)


def rasterize(
    cloud: PointCloud, sigma: float, canvas: Canvas, radius: float = FOOTPRINT_RADIUS
) -> list[list]:
    """Probability image (rows top to bottom) on the Scalar path."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    c = _footprint_scale(sigma)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    reach = radius * sigma
    # complement[i][j] = prod over points of (1 - q)
    complement: list[list] = [[1.0] * canvas.width for _ in range(canvas.height)]
    for x, y in zip(cloud.xs, cloud.ys):
        px, py = canvas.to_pixel(x, y)
        pxv, pyv = value_of(px), value_of(py)
        j0 = max(0, math.floor(pxv - reach - 0.5))
        j1 = min(canvas.width - 1, math.ceil(pxv + reach - 0.5))
        i0 = max(0, math.floor(pyv - reach - 0.5))
        i1 = min(canvas.height - 1, math.ceil(pyv + reach - 0.5))
        for i in range(i0, i1 + 1):
            dy = py - (i + 0.5)
            for j in range(j0, j1 + 1):
                dx = px - (j + 0.5)
                d2 = dx * dx + dy * dy
                if value_of(d2) > reach * reach:
                    continue
                q = smin(exp(d2 * -inv2s2) * c, Q_MAX)
                complement[i][j] = complement[i][j] * (1.0 - q)
    return [[1.0 - v for v in row] for row in complement]


def _pixel_grid(canvas: Canvas) -> tuple[np.ndarray, np.ndarray]:
    jj, ii = np.meshgrid(np.arange(canvas.width) + 0.5, np.arange(canvas.height) + 0.5)
    return jj.ravel(), ii.ravel()


def rasterize_array(
    points: np.ndarray, sigma: float, canvas: Canvas, radius: float = FOOTPRINT_RADIUS
) -> np.ndarray:
    """Numpy twin of :func:`rasterize`; returns a (height, width) array."""
    return _raster_forward(points, sigma, canvas, radius)[0]


def _raster_forward(points, sigma, canvas, radius):
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    sx, sy = canvas.scale
    px = (points[:, 0] - canvas.xmin) * sx
    py = (points[:, 1] - canvas.ymax) * sy
    cx, cy = _pixel_grid(canvas)
    dx = px[:, None] - cx[None, :]
    dy = py[:, None] - cy[None, :]
    d2 = dx * dx + dy * dy
    inside = d2 <= (radius * sigma) ** 2
    q = np.where(inside, _footprint_scale(sigma) * np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    clamped = q > Q_MAX
    q = np.minimum(q, Q_MAX)
    log_comp = np.log1p(-q).sum(axis=0)
    image = -np.expm1(log_comp)
    cache = (dx, dy, q, clamped & inside, log_comp, sx, sy)
    return image.reshape(canvas.height, canvas.width), cache


# --------------------------------------------------------------------------
# loss and fitting


def mse(image, target) -> Scalar | float:
    flat = [v for row in image for v in row]
    tflat = np.asarray(target, dtype=np.float64).ravel()
    total = sum((v - t) * (v - t) for v, t in zip(flat, tflat))
    return total * (1.0 / len(flat))


def ifs_loss_scalar(model: IfsModel, params, target, sigma: float) -> Scalar | float:
    """MSE between the rasterized model and ``target`` on the Scalar path."""
    cloud = iterate(model, params)
    return mse(rasterize(cloud, sigma, model.canvas), target)


def ifs_loss_and_grad(
    model: IfsModel, params: np.ndarray, target: np.ndarray, sigma: float
) -> tuple[float, np.ndarray, bool]:
    """Loss and d loss / d params via explicit adjoints (numpy path)."""
    params = np.asarray(params, dtype=np.float64).reshape(-1, 6)
    target = np.asarray(target, dtype=np.float64)
    canvas = model.canvas
    if target.shape != (canvas.height, canvas.width):
        raise DomainError(f"target shape {target.shape} does not match the canvas")
    pts, truncated = iterate_array(params, model.choices, model.initial_point)
    image, (dx, dy, q, clamped, log_comp, sx, sy) = _raster_forward(
        pts, sigma, canvas, FOOTPRINT_RADIUS
    )
    resid = (image - target).ravel()
    loss = float(np.mean(resid * resid))

    # d loss / d image, then through 1 - prod(1 - q)
    g_img = 2.0 * resid / resid.size
    comp = np.exp(log_comp)
    g_q = g_img[None, :] * comp[None, :] / (1.0 - q)
    g_q = np.where(clamped, 0.0, g_q)
    # dq/dpx = -q dx / sigma^2
    g_d = g_q * q * (-1.0 / (sigma * sigma))
    g_px = (g_d * dx).sum(axis=1)
    g_py = (g_d * dy).sum(axis=1)
    g_pts = np.stack([g_px * sx, g_py * sy], axis=1)

    grad = np.zeros_like(params)
    gx = gy = 0.0
    x0, y0 = map(float, model.initial_point)
    for t in range(len(pts) - 1, -1, -1):
        gx += g_pts[t, 0]
        gy += g_pts[t, 1]
        c = model.choices[t]
        x, y = (pts[t - 1] if t > 0 else (x0, y0))
        a = params[c]
        grad[c] += (gx, gx * x, gx * y, gy, gy * x, gy * y)
        gx, gy = gx * (1.0 + a[1]) + gy * a[4], gx * a[2] + gy * (1.0 + a[5])
    return loss, grad, truncated


def render(model: IfsModel, sigma: float | None = None) -> np.ndarray:
    pts, _ = iterate_array(model.params, model.choices, model.initial_point)
    return rasterize_array(pts, model.sigma if sigma is None else sigma, model.canvas)


def render_crisp(model: IfsModel) -> np.ndarray:
    """Classic IFS raster: 1 where at least one point lands in a pixel."""
    pts, _ = iterate_array(model.params, model.choices, model.initial_point)
    canvas = model.canvas
    img = np.zeros((canvas.height, canvas.width))
    px, py = canvas.to_pixel(pts[:, 0], pts[:, 1])
    j = np.floor(px).astype(int)
    i = np.floor(py).astype(int)
    ok = (j >= 0) & (j < canvas.width) & (i >= 0) & (i < canvas.height)
    img[i[ok], j[ok]] = 1.0
    return img


class FitError(RuntimeError):
    def __init__(self, message: str, model: IfsModel, loss_history: list[float]) -> None:
        super().__init__(message)
        self.model = model
        self.loss_history = loss_history


@dataclass
class FitResult:
    model: IfsModel
    loss_history: list[float]
    sigma_history: list[float]


def fit(
    model0: IfsModel,
    target: np.ndarray,
    sigma_schedule: Sequence[float] | None = None,
    steps_per_sigma: int = 300,
    lr: float = 0.01,
) -> FitResult:
    """Fit the map parameters to ``target`` by Adam on the pixel MSE.

    The sigma schedule is walked coarse to fine; ``loss_history[k]`` is the
    loss at the parameters before step k, under that step's sigma.
    """
    schedule = [model0.sigma] if sigma_schedule is None else [float(s) for s in sigma_schedule]
    if not schedule or any(s <= 0 for s in schedule):
        raise DomainError("sigma schedule needs positive entries")
    if any(b > a for a, b in zip(schedule, schedule[1:])):
        warnings.warn("sigma schedule is not coarse-to-fine (non-increasing)", stacklevel=2)
    target = np.asarray(target, dtype=np.float64)
    theta = model0.params.ravel().copy()
    opt = Adam(theta.size, lr=lr)
    losses: list[float] = []
    sigmas: list[float] = []
    for sigma in schedule:
        for _ in range(steps_per_sigma):
            loss, grad, truncated = ifs_loss_and_grad(model0, theta, target, sigma)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise FitError(
                    f"non-finite loss at step {len(losses)}", model0.with_params(theta), losses
                )
            if truncated:
                log.warning("point cloud diverged at step %d; cloud truncated", len(losses))
            losses.append(loss)
            sigmas.append(sigma)
            theta = opt.step(theta, grad.ravel())
    fitted = replace(model0.with_params(theta), sigma=schedule[-1])
    return FitResult(fitted, losses, sigmas)


# --------------------------------------------------------------------------
# files


def write_pgm(path, image: np.ndarray) -> None:
    """Plain (P2) graymap, maxval 255; values are clipped to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * 255.0).astype(int)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise DomainError(f"{path}: not a plain PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4 : 4 + w * h], dtype=np.float64)
    if data.size != w * h:
        raise DomainError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w) / maxval


def load_model(path) -> IfsModel:
    return IfsModel.from_json(json.loads(Path(path).read_text()))


def save_model(path, model: IfsModel) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=2) + "\n")
