"""Vectorized many-path version of :func:`qlearn.core.run`.

Each path owns the same RNG stream ``default_rng(seed)`` that ``run`` would
use, so path ``i`` reproduces ``run(objective, config, seeds[i])`` exactly as
long as early stopping is disabled (``grad_tol=0``, ``vanish_patience=None``).

Restrictions: the objective must provide ``grad_batch`` and must not bring
its own mini-batching, and quantized runs need nested lattices
(``eta = 1``, integer base) so every path can keep integer numerators over
``q * b**e``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import AdamState, OptimizerConfig
from .errors import ScheduleOverflowError, ScheduleViolationError
from .objectives import Objective
from .quantizer import quantize_array
from .schedule import ScheduleConfig, inf_h_bar, sigma_infimum, sup_h_bar

__all__ = ["EnsembleRun", "run_ensemble"]

_SAFE = float(2**62)


@dataclass
class EnsembleRun:
    seeds: list[int]
    initial: np.ndarray
    terminal: np.ndarray
    h_bar: np.ndarray
    q_p: np.ndarray
    rescue_count: np.ndarray
    diverged: np.ndarray
    floor_compliant: np.ndarray
    epoch_mean: np.ndarray
    epoch_var: np.ndarray
    lattice_checks: int = 0
    lattice_violations: int = 0
    history: np.ndarray | None = None
    numerators: np.ndarray | None = None
    denominators: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def _round(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``floor(q*x + 1/2)`` as floats, with the quantizer's exact tie handling."""
    return quantize_array(x, q[:, None])[0].astype(np.float64)


def _bound_check(h: np.ndarray, t: int, cfg: ScheduleConfig) -> np.ndarray:
    if cfg.enforcement == "off":
        return h
    inf_h = inf_h_bar(t, cfg)
    cap = cfg.max_exponent
    target = math.ceil(inf_h)
    if target > cap:
        if cfg.enforcement == "strict" and np.any(h < inf_h):
            raise ScheduleOverflowError(f"t={t}: inf bound {inf_h:.4g} needs h_bar above the cap {cap}")
        target = cap
    out = np.where(h < inf_h, np.maximum(h, target), h)
    if cfg.enforcement == "strict" and np.any(out > sup_h_bar(t, cfg)):
        raise ScheduleViolationError(f"t={t}: h_bar exceeds the sup bound {sup_h_bar(t, cfg):.4g}")
    return out


def run_ensemble(objective: Objective, config: OptimizerConfig, seeds: Sequence[int],
                 w0: np.ndarray | None = None,
                 init: Callable[[np.random.Generator], np.ndarray] | None = None,
                 keep_history: bool = False) -> EnsembleRun:
    """Run one optimizer path per seed, all in lockstep."""
    if objective.grad_batch is None:
        raise TypeError(f"{objective.name} has no batched gradient")
    if type(objective).epoch_batches is not Objective.epoch_batches:
        raise TypeError(f"{objective.name} brings its own mini-batching; use run() per seed")
    cfg = config.schedule.with_dim(objective.dim)
    if config.quantize and not cfg.exact_powers:
        raise ValueError("the ensemble runner needs eta = 1 and an integer base")
    seeds = [int(s) for s in seeds]
    P, n = len(seeds), objective.dim
    rngs = [np.random.default_rng(s) for s in seeds]
    if w0 is None:
        draw = init or objective.sample_start
        W0 = np.array([np.asarray(draw(r), dtype=np.float64) for r in rngs]).reshape(P, n)
    else:
        W0 = np.broadcast_to(np.asarray(w0, dtype=np.float64), (P, n)).copy()

    lr = config.lr
    p, q = lr.numerator, lr.denominator
    b = int(cfg.base)
    cap = cfg.max_exponent
    t = 0
    h0 = int(cfg.h_bar0)
    h = _bound_check(np.full(P, h0, dtype=np.int64), 0, cfg)

    def qp_of(e):
        return np.power(np.int64(b), e.astype(np.int64))

    adam = AdamState.zeros(n, config.beta1, config.beta2, config.eps_adam) if config.kind == "adam" else None
    m = np.zeros((P, n))
    v = np.zeros((P, n))
    adam_t = 0

    if config.quantize:
        num = _round(W0, qp_of(h))
        if np.max(np.abs(num)) * q >= _SAFE:
            raise OverflowError("initial numerators exceed the int64 range")
        num = num.astype(np.int64) * np.int64(q)
        e_den = h.copy()
        W = num / (q * qp_of(e_den).astype(np.float64))[:, None]
    else:
        W = W0.copy()
    initial = W.copy()

    rescue_count = np.zeros(P, dtype=np.int64)
    diverged = np.zeros(P, dtype=bool)
    compliant = np.ones(P, dtype=bool)
    epoch_mean, epoch_var = [W.mean(axis=0)], [W.var(axis=0)]
    history = [W.copy()] if keep_history else None
    checks = violations = 0
    step = 0
    noise_sd = objective.grad_noise

    for _epoch in range(config.epochs):
        noise = None
        if noise_sd > 0:
            noise = np.stack([noise_sd * r.standard_normal((config.steps_per_epoch, n)) for r in rngs])
        for s in range(config.steps_per_epoch):
            g = np.asarray(objective.grad_batch(W), dtype=np.float64).reshape(P, n)
            if noise is not None:
                g = g + noise[:, s, :]
            if adam is not None:
                adam_t += 1
                m = config.beta1 * m + (1.0 - config.beta1) * g
                v = config.beta2 * v + (1.0 - config.beta2) * g * g
                hdir = math.sqrt(1.0 - config.beta2**adam_t) / (1.0 - config.beta1**adam_t) * m / (
                    np.sqrt(v) + config.eps_adam)
            else:
                hdir = g
            bad = ~np.all(np.isfinite(hdir), axis=1)
            if np.any(bad):
                diverged |= bad
            hdir = np.where(diverged[:, None], 0.0, hdir)

            if config.quantize:
                k = _round(hdir, qp_of(h))
                zero = ~np.any(k, axis=1)
                if config.rescue and np.any(zero):
                    ceiling = float(cap)
                    if cfg.enforcement == "strict":
                        ceiling = min(ceiling, sup_h_bar(t, cfg))
                    active = zero & np.any(hdir, axis=1) & (h + 1 <= ceiling)
                    while np.any(active):
                        h = h + active
                        rescue_count += active
                        k[active] = _round(hdir[active], qp_of(h[active]))
                        zero = ~np.any(k, axis=1)
                        active = zero & np.any(hdir, axis=1) & (h + 1 <= ceiling)
                h_dir = h.copy()
                h = _bound_check(h, t, cfg)
                e_new = np.maximum(e_den, h_dir)
                up = qp_of(e_new - e_den)
                kscale = qp_of(e_new - h_dir)
                big = np.max(np.abs(num), axis=1).astype(np.float64) * up + (
                    np.max(np.abs(k), axis=1) * p * kscale)
                if np.any(big >= _SAFE):
                    raise OverflowError("lattice numerators exceed the int64 range")
                num = num * up[:, None] - np.int64(p) * k.astype(np.int64) * kscale[:, None]
                e_den = e_new
                den = q * qp_of(e_den).astype(np.float64)
                W = num / den[:, None]
            else:
                W = W - float(lr) * hdir
            step += 1
            qp_now = qp_of(h).astype(np.float64)
            compliant &= np.sqrt(n / 24.0) / qp_now >= sigma_infimum(t, cfg.C)
            if config.quantize and config.lattice_check_every and step % config.lattice_check_every == 0:
                checks += 1
                violations += _lattice_violations(num, e_den, h, q, b)
            if keep_history:
                history.append(W.copy())
            if cfg.per_minibatch:
                t += 1
                h = _bound_check(h, t, cfg)
        if not cfg.per_minibatch:
            t += 1
            h = _bound_check(h, t, cfg)
        epoch_mean.append(W.mean(axis=0))
        epoch_var.append(W.var(axis=0))

    if config.quantize:
        checks += 1
        violations += _lattice_violations(num, e_den, h, q, b)
    if h.size and np.any(h > cap):
        raise ScheduleOverflowError("h_bar exceeded the overflow cap")
    return EnsembleRun(
        seeds=seeds,
        initial=initial,
        terminal=W,
        h_bar=h,
        q_p=qp_of(h),
        rescue_count=rescue_count,
        diverged=diverged,
        floor_compliant=compliant,
        epoch_mean=np.array(epoch_mean),
        epoch_var=np.array(epoch_var),
        lattice_checks=checks,
        lattice_violations=violations,
        history=np.array(history) if keep_history else None,
        numerators=num if config.quantize else None,
        denominators=(q * qp_of(e_den)) if config.quantize else None,
        meta={"config": config.to_dict(), "objective": objective.name, "steps": step},
    )


def _lattice_violations(num: np.ndarray, e_den: np.ndarray, h: np.ndarray, q: int, b: int) -> int:
    """Paths whose weights are not integral after scaling by ``q * b**h``."""
    bad = 0
    for row, e, hh in zip(num, e_den, h):
        den = q * b ** int(e)
        scale = q * b ** int(hh)
        if any((int(x) * scale) % den for x in row):
            bad += 1
    return bad
