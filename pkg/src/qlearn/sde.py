"""Euler-Maruyama simulation of the diffusion induced by the quantized update.

The continuum model is ``dW = -lr * h(W) ds + sigma(s) dB`` with ``sigma``
piecewise constant over each unit interval ``[t, t+1)``.  One unit of ``s``
is one optimizer update; ``dt = 1/N`` subdivides it.

Paths are independent.  Path ``i`` draws from the stream
``SeedSequence(seed).spawn(paths)[i]``, so results do not depend on how
paths are grouped or scheduled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .core import OptimizerConfig, as_rational
from .ensemble import run_ensemble
from .errors import DimensionError
from .objectives import Objective
from .schedule import ScheduleConfig, trajectory

__all__ = [
    "SdeSpec",
    "EnsembleResult",
    "DivergenceReport",
    "em_step",
    "simulate_ensemble",
    "sde_for_optimizer",
    "annealed_sigma",
    "constant_sigma",
    "compare_optimizer_to_sde",
    "DIFFUSION_PRESETS",
]

# diffusion factor in front of 1/Q_p: "uniform" is the standard deviation of
# n uniform rounding errors, "floor" the constant the schedule's sigma uses
DIFFUSION_PRESETS = {
    "uniform": lambda n: math.sqrt(n / 12.0),
    "floor": lambda n: math.sqrt(n / 24.0),
}


@dataclass
class SdeSpec:
    """``drift`` maps an ``(P, n)`` state batch to ``(P, n)``; ``diffusion_scale`` maps ``s`` to a scale."""

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion_scale: Callable[[float], float]
    dim: int
    dt: float = 1.0
    horizon: int = 100
    label: str = ""

    def __post_init__(self):
        if not 0.0 < self.dt <= 1.0:
            raise ValueError("dt must lie in (0, 1]")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / self.dt))


def em_step(w: np.ndarray, s: float, spec: SdeSpec, noise: np.ndarray) -> np.ndarray:
    """``w + drift(w) dt + diffusion_scale(s) sqrt(dt) noise``; works on one state or a batch."""
    w = np.asarray(w, dtype=np.float64)
    batch = w.reshape(-1, spec.dim)
    drift = np.asarray(spec.drift(batch), dtype=np.float64).reshape(batch.shape)
    out = batch + drift * spec.dt + spec.diffusion_scale(s) * math.sqrt(spec.dt) * np.asarray(noise).reshape(batch.shape)
    return out.reshape(w.shape)


@dataclass
class EnsembleResult:
    terminal: np.ndarray
    diverged: np.ndarray
    epoch_mean: np.ndarray
    epoch_cov: np.ndarray
    basin_fraction: np.ndarray | None
    seed_ledger: dict
    initial: np.ndarray | None = None

    @property
    def paths(self) -> int:
        return len(self.terminal)

    def summary_rows(self) -> list[dict]:
        rows = []
        for t, (mu, cov) in enumerate(zip(self.epoch_mean, self.epoch_cov)):
            row = {"t": t}
            for j, v in enumerate(np.atleast_1d(mu)):
                row[f"mean_{j}"] = float(v)
            for j, v in enumerate(np.atleast_1d(np.diag(np.atleast_2d(cov)))):
                row[f"var_{j}"] = float(v)
            if self.basin_fraction is not None:
                row["basin_fraction"] = float(self.basin_fraction[t])
            rows.append(row)
        return rows


def _path_rngs(seed: int, paths: int) -> tuple[list[np.random.Generator], dict]:
    children = np.random.SeedSequence(seed).spawn(paths)
    ledger = {
        "master_seed": int(seed),
        "scheme": "numpy.random.SeedSequence(master_seed).spawn(paths)[i]",
        "paths": int(paths),
        "spawn_keys": [list(c.spawn_key) for c in children],
    }
    return [np.random.default_rng(c) for c in children], ledger


def _stats(W: np.ndarray, ok: np.ndarray, basin):
    live = W[ok]
    if len(live) == 0:
        n = W.shape[1]
        return np.full(n, np.nan), np.full((n, n), np.nan), math.nan
    mu = live.mean(axis=0)
    cov = np.atleast_2d(np.cov(live, rowvar=False, bias=True))
    frac = float(np.mean(basin(live))) if basin is not None else math.nan
    return mu, cov, frac


def simulate_ensemble(spec: SdeSpec, paths: int, seed: int, w0=None,
                      init: Callable[[np.random.Generator], np.ndarray] | None = None,
                      basin: Callable[[np.ndarray], np.ndarray] | None = None,
                      block: int = 256) -> EnsembleResult:
    """Simulate ``paths`` independent EM paths to ``spec.horizon``.

    Start points come from ``w0`` (one state or one per path) or from
    ``init(rng_i)``.  Paths whose state turns non-finite are frozen, marked
    in ``diverged`` and left out of the summaries.
    """
    if paths < 1:
        raise ValueError("need at least one path")
    rngs, ledger = _path_rngs(seed, paths)
    n = spec.dim
    if w0 is not None:
        W = np.broadcast_to(np.asarray(w0, dtype=np.float64), (paths, n)).copy()
    elif init is not None:
        W = np.array([np.asarray(init(r), dtype=np.float64) for r in rngs]).reshape(paths, n)
    else:
        raise ValueError("give either w0 or init")
    initial = W.copy()
    ok = np.ones(paths, dtype=bool)
    N = spec.substeps
    total = spec.horizon * N
    means, covs, fracs = [], [], []
    mu, cov, frac = _stats(W, ok, basin)
    means.append(mu), covs.append(cov), fracs.append(frac)
    k = 0
    buf = None
    while k < total:
        size = min(block, total - k)
        buf = np.stack([r.standard_normal((size, n)) for r in rngs], axis=1)
        for j in range(size):
            s = (k + j) * spec.dt
            nxt = em_step(W, s, spec, buf[j])
            good = np.all(np.isfinite(nxt), axis=1)
            newly = ok & ~good
            ok &= good
            W = np.where(ok[:, None], nxt, W)
            if np.any(newly):
                W[newly] = np.nan
            if (k + j + 1) % N == 0:
                mu, cov, frac = _stats(W, ok, basin)
                means.append(mu), covs.append(cov), fracs.append(frac)
        k += size
    return EnsembleResult(
        terminal=W,
        diverged=~ok,
        epoch_mean=np.array(means),
        epoch_cov=np.array(covs),
        basin_fraction=np.array(fracs) if basin is not None else None,
        seed_ledger=ledger,
        initial=initial,
    )


def constant_sigma(sigma: float) -> Callable[[float], float]:
    return lambda s: sigma


def annealed_sigma(c: float) -> Callable[[float], float]:
    """``c / ln(t + 2)`` evaluated at the start of each unit interval."""
    return lambda s: c / math.log(math.floor(s) + 2)


def sde_for_optimizer(objective: Objective, lr, schedule: ScheduleConfig | None = None,
                      fixed_q_p: int | None = None, horizon: int = 100, N: int = 1,
                      preset: str = "uniform", gain: float = 1.0) -> SdeSpec:
    """SDE matched to a quantized run: drift ``-lr * grad``, diffusion ``factor/Q_p(t)``.

    ``Q_p(t)`` follows the deterministic schedule (no rescue events) unless
    ``fixed_q_p`` pins it.  ``preset`` picks the ``sqrt(n/12)``
    ("uniform") or ``sqrt(n/24)`` ("floor") factor; ``gain`` multiplies it (0 switches
    diffusion off).
    """
    if objective.grad_batch is None:
        raise TypeError(f"{objective.name} has no batched gradient")
    alpha = float(as_rational(lr))
    n = objective.dim
    factor = DIFFUSION_PRESETS[preset](n) * gain
    if fixed_q_p is not None:
        qps = None
        q_fixed = int(fixed_q_p)
    else:
        cfg = (schedule or ScheduleConfig()).with_dim(n)
        qps = [row["q_p"] for row in trajectory(cfg, horizon)]
        q_fixed = None

    def diffusion(s):
        if q_fixed is not None:
            return factor / q_fixed
        return factor / qps[min(int(s), len(qps) - 1)]

    grad_batch = objective.grad_batch

    def drift(W):
        return -alpha * grad_batch(W)

    return SdeSpec(drift=drift, diffusion_scale=diffusion, dim=n, dt=1.0 / N, horizon=horizon,
                   label=f"{objective.name}:{preset}")


@dataclass
class DivergenceReport:
    paths: int
    ks_terminal: list[float]
    ks_epoch_means: list[float]
    max_mean_gap: list[float]
    optimizer_var: list[float]
    sde_var: list[float]
    var_ratio: list[float]
    exact_agreement: bool
    max_abs_diff: float
    optimizer_diverged: int
    sde_diverged: int
    basin_fraction: dict = field(default_factory=dict)
    seed_ledger: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self, **kw) -> str:
        def clean(o):
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [clean(v) for v in o]
            if isinstance(o, float) and not math.isfinite(o):
                return None
            if isinstance(o, np.generic):
                return clean(o.item())
            return o

        return json.dumps(clean(self.__dict__), **kw)


def compare_optimizer_to_sde(objective: Objective, config: OptimizerConfig, spec: SdeSpec,
                             paths: int, seed: int,
                             init: Callable[[np.random.Generator], np.ndarray] | None = None,
                             stationary_from: int | None = None,
                             basin: Callable[[np.ndarray], np.ndarray] | None = None,
                             ) -> tuple[DivergenceReport, object, EnsembleResult]:
    """Run ``paths`` optimizer runs and ``paths`` SDE paths from the same starts.

    Variances are pooled over epochs ``stationary_from..horizon`` when given,
    otherwise taken at the horizon.  Returns ``(report, optimizer_run, sde_result)``.
    """
    if spec.dim != objective.dim:
        raise DimensionError(f"SDE dim {spec.dim} != objective dim {objective.dim}")
    horizon = config.epochs * config.steps_per_epoch
    if spec.horizon != horizon:
        raise ValueError(f"SDE horizon {spec.horizon} != optimizer steps {horizon}")
    run_seeds = [int(c.generate_state(1, dtype=np.uint32)[0])
                 for c in np.random.SeedSequence(seed).spawn(paths)]
    keep = stationary_from is not None
    opt = run_ensemble(objective, config, run_seeds, init=init, keep_history=keep)
    sde = simulate_ensemble(spec, paths, seed + 1, w0=opt.initial, basin=basin)

    ok_o = ~opt.diverged
    ok_s = ~sde.diverged
    n = objective.dim
    if keep:
        # optimizer variance pooled over the stationary window, per coordinate
        window = opt.history[stationary_from:]
        o_var = window[:, ok_o, :].var(axis=1).mean(axis=0)
        s_var = np.array([np.mean([np.diag(np.atleast_2d(c))[j] for c in sde.epoch_cov[stationary_from:]])
                          for j in range(n)])
        opt_samples = window[-1][ok_o]
    else:
        o_var = opt.terminal[ok_o].var(axis=0)
        s_var = sde.terminal[ok_s].var(axis=0)
        opt_samples = opt.terminal[ok_o]
    # only the statistic is used, so skip the exact p-value computation
    ks_t = [float(stats.ks_2samp(opt_samples[:, j], sde.terminal[ok_s][:, j], method="asymp").statistic)
            for j in range(n)]
    ks_m = [float(stats.ks_2samp(opt.epoch_mean[:, j], sde.epoch_mean[:, j], method="asymp").statistic)
            for j in range(n)]
    gap = np.nanmax(np.abs(opt.epoch_mean - sde.epoch_mean), axis=0)
    diff = float(np.max(np.abs(opt.terminal - sde.terminal))) if ok_o.all() and ok_s.all() else math.inf
    basin_info = {}
    if basin is not None:
        basin_info = {
            "optimizer": float(np.mean(basin(opt.terminal[ok_o]))),
            "sde": float(sde.basin_fraction[-1]),
        }
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(o_var > 0, s_var / o_var, np.inf)
    report = DivergenceReport(
        paths=paths,
        ks_terminal=ks_t,
        ks_epoch_means=ks_m,
        max_mean_gap=[float(v) for v in gap],
        optimizer_var=[float(v) for v in o_var],
        sde_var=[float(v) for v in s_var],
        var_ratio=[float(v) for v in ratio],
        exact_agreement=diff == 0.0,
        max_abs_diff=diff,
        optimizer_diverged=int((~ok_o).sum()),
        sde_diverged=int((~ok_s).sum()),
        basin_fraction=basin_info,
        seed_ledger={"optimizer_run_seeds": "SeedSequence(seed).spawn(paths)[i].generate_state(1)",
                     "master_seed": int(seed), "sde": sde.seed_ledger},
        meta={"objective": objective.name, "optimizer": config.to_dict(), "sde_label": spec.label,
              "dt": spec.dt, "horizon": spec.horizon},
    )
    return report, opt, sde
