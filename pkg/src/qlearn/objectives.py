"""Benchmark objectives with analytic gradients and ball-shaped domains.

Every objective carries the open ball ``B(center, radius)`` on which its
Lipschitz constant (relative to the global minimizer) is declared.  Gradients
are checked against central finite differences when the object is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .errors import DimensionError, NonFiniteError

__all__ = [
    "Objective",
    "make_quadratic",
    "make_double_well_1d",
    "make_rastrigin",
    "make_ackley",
    "brute_force_min",
    "gradient_check",
    "lipschitz_check",
    "OBJECTIVES",
    "make_objective",
    "double_well_stationary_points",
]


def _uniform_ball(rng: np.random.Generator, center: np.ndarray, radius: float) -> np.ndarray:
    n = center.size
    d = rng.standard_normal(n)
    d /= np.linalg.norm(d)
    r = radius * rng.random() ** (1.0 / n)
    return center + r * d


@dataclass(eq=False)
class Objective:
    """A differentiable scalar field on ``R^dim``.

    ``value_batch`` / ``grad_batch`` evaluate many points at once (rows) and
    are what the vectorized ensemble runner uses.  ``grad_noise`` adds
    i.i.d. Gaussian noise of that standard deviation to every stochastic
    gradient query, standing in for mini-batch sampling.
    """

    name: str
    dim: int
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    center: np.ndarray
    radius: float
    lipschitz: float | None = None
    minimizer: np.ndarray | None = None
    min_value: float | None = None
    value_batch: Callable[[np.ndarray], np.ndarray] | None = None
    grad_batch: Callable[[np.ndarray], np.ndarray] | None = None
    grad_noise: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(self.dim)

    # mini-batch protocol used by the optimizer loop
    def epoch_batches(self, rng: np.random.Generator, steps: int) -> list:
        if self.grad_noise > 0:
            return list(self.grad_noise * rng.standard_normal((steps, self.dim)))
        return [None] * steps

    def batch_value_and_grad(self, w: np.ndarray, batch) -> tuple[float, np.ndarray]:
        f = float(self.value(w))
        g = np.asarray(self.grad(w), dtype=np.float64)
        if batch is not None:
            g = g + batch
        return f, g

    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        return _uniform_ball(rng, self.center, self.radius)

    def metrics(self, w: np.ndarray) -> dict:
        f = float(self.value(w))
        return {"final_f": f, "train": f, "test": f}

    def contains(self, w) -> bool:
        return float(np.linalg.norm(np.asarray(w) - self.center)) < self.radius


def gradient_check(obj: Objective, points: int = 100, rtol: float = 1e-5,
                   seed: int = 0, h: float = 1e-6, coords: int | None = None,
                   sampler: Callable | None = None) -> float:
    """Worst relative central-difference discrepancy over random ball points.

    Raises ``AssertionError`` if it exceeds ``rtol``.  ``coords`` limits the
    check to that many random coordinates per point.
    """
    rng = np.random.default_rng(seed)
    sampler = sampler or obj.sample_start
    worst = 0.0
    for _ in range(points):
        x = sampler(rng)
        g = np.asarray(obj.grad(x), dtype=np.float64)
        idx = np.arange(obj.dim) if coords is None else rng.choice(obj.dim, coords, replace=False)
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            e = np.zeros(obj.dim)
            e[i] = h
            fd[j] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
        scale = max(1.0, float(np.linalg.norm(g[idx])))
        worst = max(worst, float(np.linalg.norm(fd - g[idx])) / scale)
    if worst > rtol:
        raise AssertionError(f"{obj.name}: gradient check failed, rel. error {worst:.3g} > {rtol}")
    return worst


def lipschitz_check(obj: Objective, samples: int = 10_000, seed: int = 0) -> float:
    """Largest ``|f(x) - f(x*)| / |x - x*|`` seen on ball samples, as a fraction of L."""
    if obj.lipschitz is None or obj.minimizer is None:
        raise ValueError(f"{obj.name} declares no Lipschitz constant")
    rng = np.random.default_rng(seed)
    fstar = obj.value(obj.minimizer)
    worst = 0.0
    for _ in range(samples):
        x = obj.sample_start(rng)
        d = float(np.linalg.norm(x - obj.minimizer))
        if d > 0:
            worst = max(worst, abs(obj.value(x) - fstar) / d)
    return worst / obj.lipschitz


def _finish(obj: Objective, self_test: bool) -> Objective:
    if self_test:
        gradient_check(obj)
    return obj


def make_quadratic(n: int = 2, curvature: float = 1.0, radius: float = 4.0,
                   grad_noise: float = 0.0, self_test: bool = True) -> Objective:
    """``f(w) = curvature/2 * |w|^2``."""
    if curvature <= 0:
        raise ValueError("curvature must be > 0")
    c = float(curvature)
    obj = Objective(
        name="quadratic",
        dim=n,
        value=lambda w: 0.5 * c * float(np.dot(w, w)),
        grad=lambda w: c * np.asarray(w, dtype=np.float64),
        value_batch=lambda W: 0.5 * c * np.einsum("ij,ij->i", W, W),
        grad_batch=lambda W: c * W,
        center=np.zeros(n),
        radius=radius,
        # |f(x)| = c/2 |x|^2 <= (c*radius/2) |x| inside the ball
        lipschitz=0.5 * c * radius,
        minimizer=np.zeros(n),
        min_value=0.0,
        grad_noise=grad_noise,
        params={"n": n, "curvature": c, "radius": radius, "grad_noise": grad_noise},
    )
    return _finish(obj, self_test)


def _dw(x):
    # float64 so a diverging iterate gives inf (caught downstream) rather than OverflowError
    x = np.float64(x) if np.ndim(x) == 0 else np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        x2 = x * x  # explicit products: scalar and array powers can differ in the last bit
        return x2 * x2 - 8.0 * x2 + 3.0 * x


def _dw_grad(x):
    x = np.float64(x) if np.ndim(x) == 0 else np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return 4.0 * (x * x * x) - 16.0 * x + 3.0


def double_well_stationary_points() -> np.ndarray:
    """Sorted real roots of ``4x^3 - 16x + 3``: global min, local max, local min."""
    return np.sort(np.roots([4.0, 0.0, -16.0, 3.0]).real)


def make_double_well_1d(grad_noise: float = 0.0, self_test: bool = True) -> Objective:
    """``f(x) = x^4 - 8x^2 + 3x``: a deep well near -2.08, a shallow one near 1.89."""
    lo, mid, hi = double_well_stationary_points()
    center = 0.5 * (lo + hi)
    radius = 0.5 * (hi - lo) + 1.5
    xstar = lo
    # |f'| is maximal on the closed ball at an endpoint or at f''=0 (x^2 = 4/3)
    cands = [center - radius, center + radius, -math.sqrt(4 / 3), math.sqrt(4 / 3)]
    lip = max(abs(_dw_grad(x)) for x in cands)
    obj = Objective(
        name="double_well",
        dim=1,
        value=lambda w: float(_dw(np.asarray(w, dtype=np.float64)[0])),
        grad=lambda w: np.array([_dw_grad(float(np.asarray(w)[0]))]),
        value_batch=lambda W: _dw(W[:, 0]),
        grad_batch=lambda W: _dw_grad(W),
        center=np.array([center]),
        radius=radius,
        lipschitz=lip,
        minimizer=np.array([xstar]),
        min_value=float(_dw(xstar)),
        grad_noise=grad_noise,
        params={"grad_noise": grad_noise, "barrier": float(mid)},
    )
    return _finish(obj, self_test)


def make_rastrigin(n: int = 2, radius: float = 5.12, self_test: bool = True) -> Objective:
    """Standard Rastrigin, ``10n + sum(x^2 - 10 cos(2 pi x))``."""
    tau = 2.0 * math.pi

    def value_batch(W):
        return 10.0 * W.shape[1] + np.sum(W * W - 10.0 * np.cos(tau * W), axis=1)

    def grad_batch(W):
        return 2.0 * W + 10.0 * tau * np.sin(tau * W)

    obj = Objective(
        name="rastrigin",
        dim=n,
        value=lambda w: float(value_batch(np.asarray(w, dtype=np.float64)[None])[0]),
        grad=lambda w: grad_batch(np.asarray(w, dtype=np.float64)[None])[0],
        value_batch=value_batch,
        grad_batch=grad_batch,
        center=np.zeros(n),
        radius=radius,
        # mean-value bound: |grad| <= 2 radius + 20 pi sqrt(n)
        lipschitz=2.0 * radius + 10.0 * tau * math.sqrt(n),
        minimizer=np.zeros(n),
        min_value=0.0,
        params={"n": n, "radius": radius},
    )
    return _finish(obj, self_test)


def make_ackley(n: int = 2, radius: float = 5.0, self_test: bool = True) -> Objective:
    """Standard Ackley (a=20, b=0.2, c=2 pi) with f(0) = 0 exactly."""
    tau = 2.0 * math.pi

    def value_batch(W):
        d = W.shape[1]
        r = np.sqrt(np.sum(W * W, axis=1) / d)
        s = np.sum(np.cos(tau * W), axis=1) / d
        # grouped so both brackets vanish exactly at the origin
        return 20.0 * (1.0 - np.exp(-0.2 * r)) + (math.e - np.exp(s))

    def grad_batch(W):
        d = W.shape[1]
        r = np.sqrt(np.sum(W * W, axis=1) / d)
        s = np.sum(np.cos(tau * W), axis=1) / d
        with np.errstate(invalid="ignore", divide="ignore"):
            g1 = np.where(r[:, None] > 0, 4.0 * np.exp(-0.2 * r)[:, None] * W / (d * r[:, None]), 0.0)
        g2 = (tau / d) * np.exp(s)[:, None] * np.sin(tau * W)
        return g1 + g2

    obj = Objective(
        name="ackley",
        dim=n,
        value=lambda w: float(value_batch(np.asarray(w, dtype=np.float64)[None])[0]),
        grad=lambda w: grad_batch(np.asarray(w, dtype=np.float64)[None])[0],
        value_batch=value_batch,
        grad_batch=grad_batch,
        center=np.zeros(n),
        radius=radius,
        # |grad| <= (4 + 2 pi e) / sqrt(n)
        lipschitz=(4.0 + tau * math.e) / math.sqrt(n),
        minimizer=np.zeros(n),
        min_value=0.0,
        params={"n": n, "radius": radius},
    )
    return _finish(obj, self_test)


def brute_force_min(obj: Objective, resolution: int = 401) -> tuple[np.ndarray, float]:
    """Dense grid scan over the ball followed by a bounded local polish.

    Only for ``dim <= 2``; higher dimensions raise :class:`DimensionError`.
    """
    if obj.dim > 2:
        raise DimensionError(f"brute force is limited to dim <= 2, got {obj.dim}")
    axes = [np.linspace(c - obj.radius, c + obj.radius, resolution) for c in obj.center]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, obj.dim)
    grid = grid[np.linalg.norm(grid - obj.center, axis=1) < obj.radius]
    if obj.value_batch is not None:
        vals = obj.value_batch(grid)
    else:
        vals = np.array([obj.value(p) for p in grid])
    best = grid[int(np.argmin(vals))]
    step = 2 * obj.radius / (resolution - 1)
    bounds = [(b - step, b + step) for b in best]
    res = optimize.minimize(lambda x: obj.value(x), best, jac=lambda x: obj.grad(x),
                            method="L-BFGS-B", bounds=bounds)
    if res.fun <= float(np.min(vals)):
        return np.asarray(res.x), float(res.fun)
    return best, float(np.min(vals))


def _mlp(**kw):
    from .mlp import make_mlp_task

    return make_mlp_task(**kw)


OBJECTIVES: dict[str, Callable[..., Objective]] = {
    "quadratic": make_quadratic,
    "double_well": make_double_well_1d,
    "rastrigin": make_rastrigin,
    "ackley": make_ackley,
    "mlp": _mlp,
}


def make_objective(name: str, **params) -> Objective:
    try:
        factory = OBJECTIVES[name]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}; choose from {sorted(OBJECTIVES)}") from None
    obj = factory(**params)
    if not np.all(np.isfinite(obj.center)):
        raise NonFiniteError("objective domain center is not finite")
    return obj
