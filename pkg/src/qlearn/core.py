"""Quantized learning equation with a monotone resolution schedule.

One step of the quantized update::

    h   = J(grad f(w))                        # SGD: identity, ADAM: moment ratio
    k   = floor(Q_p * h + 0.5)                # integer grid
    hQ  = k / Q_p                             # rescue raises Q_p while k == 0
    w  <- w - alpha * hQ                      # alpha = p/q exactly rational

Weights are integer numerators over a common denominator; after every step
``q * Q_p(t) * w`` is integral whenever successive lattices nest (``eta = 1``
and an integer base).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import DimensionError, NonFiniteError, QLearnError
from .objectives import Objective
from .quantizer import LatticeVector, as_int_array, quantize_vector, scale_int_array
from .schedule import (
    ScheduleConfig,
    SchedulerState,
    advance_epoch,
    check_bound,
    initial_state,
    noise_floor,
    raise_resolution,
    rescue_ceiling,
    sigma_infimum,
)

__all__ = [
    "AdamState",
    "OptimizerConfig",
    "OptimizerState",
    "StepOutcome",
    "RunRecord",
    "as_rational",
    "direction_sgd",
    "direction_adam",
    "step_unquantized",
    "step_quantized",
    "rescue_vanishing",
    "init_state",
    "run",
]

ALGORITHMS = ("sgd", "adam")


def as_rational(lr) -> Fraction:
    """Exact learning rate in (0, 1]; floats go through their shortest repr."""
    if isinstance(lr, Fraction):
        frac = lr
    elif isinstance(lr, float):
        if not math.isfinite(lr):
            raise ValueError(f"learning rate must be finite, got {lr}")
        frac = Fraction(repr(lr))
    else:
        frac = Fraction(lr)
    if not 0 < frac <= 1:
        raise ValueError(f"learning rate must lie in (0, 1], got {frac}")
    return frac


def _check_finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{what} contains NaN or inf")
    return v


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def direction_sgd(grad) -> np.ndarray:
    """SGD direction: the gradient itself."""
    return _check_finite(np.asarray(grad, dtype=np.float64), "gradient")


def direction_adam(grad, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected ADAM direction ``sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps)``."""
    g = _check_finite(np.asarray(grad, dtype=np.float64), "gradient")
    if g.shape != state.m.shape:
        raise DimensionError(f"gradient shape {g.shape} != moment shape {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    h = math.sqrt(1.0 - b2**t) / (1.0 - b1**t) * m / (np.sqrt(v) + state.eps)
    _check_finite(h, "ADAM direction")
    return h, replace(state, m=m, v=v, step=t)


@dataclass(frozen=True)
class OptimizerConfig:
    """Everything that determines a run apart from the objective and seed.

    ``steps_per_epoch`` applies to objectives without their own batching;
    ``vanish_patience`` stops a run after that many consecutive steps whose
    quantized direction stayed zero at the rescue ceiling (``None`` disables).
    ``eval_every > 0`` evaluates ``objective.metrics`` every that many epochs
    and keeps the epoch with the best ``test`` value.
    """

    kind: str = "sgd"
    lr: Fraction = Fraction(1, 10)
    quantize: bool = True
    rescue: bool = True
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 100
    steps_per_epoch: int = 1
    grad_tol: float = 0.0
    vanish_patience: int | None = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lattice_check_every: int = 100
    record_weights: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if self.kind not in ALGORITHMS:
            raise ValueError(f"kind must be one of {ALGORITHMS}")
        object.__setattr__(self, "lr", as_rational(self.lr))
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("ADAM betas must lie in (0, 1)")

    @property
    def label(self) -> str:
        base = "ADAM" if self.kind == "adam" else "SGD"
        if not self.quantize:
            return base
        return "QtADAM" if self.kind == "adam" else "QSGD"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = str(self.lr)
        return d


@dataclass
class OptimizerState:
    weights: LatticeVector | np.ndarray
    lr: Fraction
    scheduler: SchedulerState
    derivative: AdamState | None = None
    step: int = 0
    rescue_count: int = 0

    @property
    def w(self) -> np.ndarray:
        if isinstance(self.weights, LatticeVector):
            return self.weights.values
        return self.weights


@dataclass(frozen=True)
class StepOutcome:
    new_weights: LatticeVector
    quantized_direction: LatticeVector
    raw_direction: np.ndarray
    eps_applied: np.ndarray
    vanished_initially: bool
    vanished_at_cap: bool
    h_bar_after: int
    rescue_raises: int


def init_state(w0, config: OptimizerConfig, schedule: ScheduleConfig | None = None) -> OptimizerState:
    """Initial weights, quantized onto the ``1/Q_p(0)`` lattice when quantizing."""
    sched_cfg = schedule or config.schedule
    sched = initial_state(sched_cfg)
    w0 = _check_finite(np.asarray(w0, dtype=np.float64).copy(), "initial weights")
    deriv = AdamState.zeros(w0.size, config.beta1, config.beta2, config.eps_adam) if config.kind == "adam" else None
    weights = quantize_vector(w0, sched.q_p)[0] if config.quantize else w0
    return OptimizerState(weights=weights, lr=config.lr, scheduler=sched, derivative=deriv)


def _direction(state: OptimizerState, grad) -> tuple[np.ndarray, AdamState | None]:
    if state.derivative is None:
        return direction_sgd(grad), None
    return direction_adam(grad, state.derivative)


def step_unquantized(state: OptimizerState, grad) -> OptimizerState:
    """Plain update ``w <- w - lr * h``."""
    w = np.asarray(state.w, dtype=np.float64)
    h, deriv = _direction(state, grad)
    if h.shape != w.shape:
        raise DimensionError(f"direction shape {h.shape} != weight shape {w.shape}")
    w_new = _check_finite(w - float(state.lr) * h, "weights")
    return replace(state, weights=w_new, derivative=deriv, step=state.step + 1)


def rescue_vanishing(h, scheduler: SchedulerState, config: ScheduleConfig
                     ) -> tuple[LatticeVector, SchedulerState, bool]:
    """Refine the lattice until ``h`` quantizes to something nonzero.

    Returns ``(hQ, scheduler, at_cap)``.  The exponent grows one step at a
    time and stops at :func:`~qlearn.schedule.rescue_ceiling`; if ``hQ`` is
    still zero there, ``at_cap`` is True.
    """
    h = np.asarray(h, dtype=np.float64)
    hq, _ = quantize_vector(h, scheduler.q_p)
    ceiling = rescue_ceiling(scheduler, config)
    while hq.is_zero() and scheduler.h_bar + 1 <= ceiling:
        if not np.any(h):
            break
        scheduler = raise_resolution(scheduler, config)
        hq, _ = quantize_vector(h, scheduler.q_p)
    return hq, scheduler, hq.is_zero()


def _apply(weights: LatticeVector, lr: Fraction, k: np.ndarray, q_p: int) -> LatticeVector:
    """Exact ``w - (p/q) * k / q_p`` on the common lattice."""
    p, q = lr.numerator, lr.denominator
    step_den = q * q_p
    den = math.lcm(weights.denominator, step_den)
    w_num = scale_int_array(weights.numerators, den // weights.denominator)
    d_num = scale_int_array(as_int_array(k), p * (den // step_den))
    if w_num.dtype != d_num.dtype:
        w_num, d_num = w_num.astype(object), d_num.astype(object)
    return LatticeVector(w_num - d_num, den)


def step_quantized(state: OptimizerState, grad, config: ScheduleConfig, rescue: bool = True
                   ) -> tuple[OptimizerState, StepOutcome]:
    """One quantized update including the vanishing rescue and bound check."""
    weights = state.weights
    if not isinstance(weights, LatticeVector):
        raise TypeError("step_quantized needs lattice weights; build the state with quantize=True")
    h, deriv = _direction(state, grad)
    if h.shape != (len(weights),):
        raise DimensionError(f"direction shape {h.shape} != weight shape ({len(weights)},)")
    sched = state.scheduler
    hq, eps = quantize_vector(h, sched.q_p)
    vanished = hq.is_zero()
    at_cap = vanished
    raises = 0
    if vanished and rescue:
        h_before = sched.h_bar
        hq, sched, at_cap = rescue_vanishing(h, sched, config)
        raises = sched.h_bar - h_before
        eps = hq.numerators - sched.q_p * h
    # a raise here leaves hQ valid: it lies on the coarser lattice
    sched = check_bound(sched, config)
    new_w = _apply(weights, state.lr, hq.numerators, hq.denominator)
    outcome = StepOutcome(
        new_weights=new_w,
        quantized_direction=hq,
        raw_direction=h,
        eps_applied=np.asarray(eps, dtype=np.float64),
        vanished_initially=vanished,
        vanished_at_cap=at_cap,
        h_bar_after=sched.h_bar,
        rescue_raises=raises,
    )
    new_state = replace(
        state,
        weights=new_w,
        scheduler=sched,
        derivative=deriv,
        step=state.step + 1,
        rescue_count=state.rescue_count + raises,
    )
    return new_state, outcome


TRACE_COLUMNS = (
    "step", "epoch", "f", "grad_norm", "q_p", "h_bar", "sigma", "sigma_eq6",
    "inf_sigma", "rescues", "vanished", "floor_compliant",
)


@dataclass
class RunRecord:
    """Per-step trace plus run metadata."""

    seed: int
    config: dict
    objective: str
    trace: dict[str, list] = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    weights: list[np.ndarray] = field(default_factory=list)
    final_weights: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    stop_reason: str | None = None
    rescue_count: int = 0
    lattice_checks: int = 0
    lattice_violations: int = 0
    floor_compliant: bool = True
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def steps(self) -> int:
        return len(self.trace["step"])

    def append(self, **row) -> None:
        for c in TRACE_COLUMNS:
            self.trace[c].append(row[c])

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "objective": self.objective,
            "config": self.config,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
            "rescue_count": self.rescue_count,
            "lattice_checks": self.lattice_checks,
            "lattice_violations": self.lattice_violations,
            "floor_compliant": self.floor_compliant,
            "metrics": self.metrics,
            "final_weights": None if self.final_weights is None else [float(v) for v in self.final_weights],
            "extra": self.extra,
            "wall_time": self.wall_time,
        }


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _lattice_ok(weights: LatticeVector, lr: Fraction, q_p: int) -> bool:
    return weights.on_lattice(lr.denominator * q_p)


def _track_best(record: RunRecord, objective: Objective, w: np.ndarray, epoch: int) -> None:
    m = objective.metrics(w)
    best = record.extra.get("best_metrics")
    if best is None or m["test"] > best["test"]:
        record.extra["best_metrics"] = m
        record.extra["best_epoch"] = epoch


def run(objective: Objective, config: OptimizerConfig, seed: int,
        w0: np.ndarray | None = None,
        init: Callable[[np.random.Generator], np.ndarray] | None = None) -> RunRecord:
    """Run the optimizer loop and return its trace.

    The loop stops at ``config.epochs``, when the raw gradient norm drops
    below ``grad_tol``, or after ``vanish_patience`` consecutive steps that
    stayed vanished at the rescue ceiling.  Recoverable failures (non-finite
    values, schedule violations) end the run with ``status="failed"``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    sched_cfg = config.schedule
    if sched_cfg.n != objective.dim:
        sched_cfg = sched_cfg.with_dim(objective.dim)
    record = RunRecord(seed=seed, config=config.to_dict(), objective=objective.name)
    record.config["schedule"]["n"] = sched_cfg.n
    if w0 is None:
        w0 = init(rng) if init is not None else objective.sample_start(rng)
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (objective.dim,):
        raise DimensionError(f"initial point has shape {w0.shape}, objective dim is {objective.dim}")

    state = None
    try:
        state = init_state(w0, config, sched_cfg)
        if config.record_weights:
            record.weights.append(state.w.copy())
        vanish_run = 0
        stop = None
        for epoch in range(config.epochs):
            batches = objective.epoch_batches(rng, config.steps_per_epoch)
            for batch in batches:
                w = state.w
                f, g = objective.batch_value_and_grad(w, batch)
                gnorm = float(np.linalg.norm(g))
                if config.grad_tol > 0 and gnorm < config.grad_tol:
                    stop = "grad_tol"
                    break
                if config.quantize:
                    state, out = step_quantized(state, g, sched_cfg, rescue=config.rescue)
                    rescues, vanished = out.rescue_raises, out.vanished_at_cap
                else:
                    state = step_unquantized(state, g)
                    rescues, vanished = 0, False
                sched = state.scheduler
                sigma = noise_floor(sched_cfg.n, sched.q_p)
                inf_sigma = sigma_infimum(sched.t, sched_cfg.C)
                compliant = sigma >= inf_sigma
                record.floor_compliant &= compliant
                record.append(
                    step=state.step, epoch=epoch, f=f, grad_norm=gnorm, q_p=sched.q_p,
                    h_bar=sched.h_bar, sigma=sigma, sigma_eq6=math.sqrt(sched_cfg.n / 12.0) / sched.q_p,
                    inf_sigma=inf_sigma, rescues=rescues, vanished=int(vanished),
                    floor_compliant=int(compliant),
                )
                if config.quantize and config.lattice_check_every and (
                    state.step % config.lattice_check_every == 0
                ):
                    record.lattice_checks += 1
                    if not _lattice_ok(state.weights, state.lr, sched.q_p):
                        record.lattice_violations += 1
                if config.record_weights:
                    record.weights.append(state.w.copy())
                vanish_run = vanish_run + 1 if vanished else 0
                if config.vanish_patience and vanish_run >= config.vanish_patience:
                    stop = "vanished_at_cap"
                    break
                if sched_cfg.per_minibatch:
                    state = replace(state, scheduler=advance_epoch(state.scheduler, sched_cfg))
            if stop:
                break
            if config.eval_every and (epoch + 1) % config.eval_every == 0:
                _track_best(record, objective, state.w, epoch)
            if not sched_cfg.per_minibatch:
                state = replace(state, scheduler=advance_epoch(state.scheduler, sched_cfg))
        record.stop_reason = stop or "max_epochs"
    except (QLearnError, OverflowError) as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        record.stop_reason = "error"

    if state is not None:
        if config.quantize:
            record.lattice_checks += 1
            if not _lattice_ok(state.weights, state.lr, state.scheduler.q_p):
                record.lattice_violations += 1
        record.final_weights = np.asarray(state.w, dtype=np.float64).copy()
        record.rescue_count = state.rescue_count
        record.extra["final_h_bar"] = state.scheduler.h_bar
        record.extra["final_q_p"] = state.scheduler.q_p
        try:
            record.metrics = objective.metrics(record.final_weights)
        except (QLearnError, OverflowError) as exc:
            record.metrics = {}
            if record.status == "ok":
                record.status = "failed"
                record.error = f"{type(exc).__name__}: {exc}"
    record.wall_time = time.perf_counter() - t0
    return record
