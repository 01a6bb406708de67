"""Monotone resolution schedule ``Q_p(t) = eta * b**h_bar(t)``.

The integer exponent ``h_bar`` never decreases.  Its real-valued bounds are::

    sup_h(t) = 0.5 * log_b( n * ln(t+2) / (24 * eta**2 * C) )
    inf_h(t) = sup_h(t) - beta / (t+2)

``log`` is natural throughout; ``log_b`` is base ``b``.  With large ``C`` the
bounds are negative and therefore vacuous, which is why enforcement is a
mode rather than a hard rule:

* ``clamped``: raise ``h_bar`` until ``h_bar >= inf_h``; the sup bound is soft.
* ``strict``: as clamped, but exceeding ``sup_h`` or the overflow cap raises.
* ``off``: bounds are reported, never acted on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from .errors import ScheduleOverflowError, ScheduleViolationError

__all__ = [
    "ENFORCEMENT_MODES",
    "ScheduleConfig",
    "SchedulerState",
    "sigma_infimum",
    "sup_h_bar",
    "inf_h_bar",
    "q_p_of",
    "noise_floor",
    "initial_state",
    "check_bound",
    "advance_epoch",
    "rescue_ceiling",
    "trajectory",
]

ENFORCEMENT_MODES = ("strict", "clamped", "off")
_Q_MAX = 2**62


@dataclass(frozen=True)
class ScheduleConfig:
    eta: float = 1.0
    base: float = 2.0
    h_bar0: int = 2
    C: float = 1e6
    beta: float = 20.0
    n: int = 1
    enforcement: str = "clamped"
    per_minibatch: bool = False
    h_max: int | None = None

    def __post_init__(self):
        if not self.base > 1:
            raise ValueError("base must be > 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.C > 0:
            raise ValueError("C must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if int(self.h_bar0) != self.h_bar0 or self.h_bar0 < 0:
            raise ValueError("h_bar0 must be a non-negative integer")
        if self.enforcement not in ENFORCEMENT_MODES:
            raise ValueError(f"enforcement must be one of {ENFORCEMENT_MODES}")
        if self.h_max is not None and self.h_max < self.h_bar0:
            raise ValueError("h_max must be >= h_bar0")

    @property
    def exact_powers(self) -> bool:
        """True when ``q_p_of`` is an exact integer power of ``base``."""
        return self.eta == 1 and float(self.base).is_integer()

    @property
    def max_exponent(self) -> int:
        if self.h_max is not None:
            return int(self.h_max)
        # largest h with eta * b**h <= 2**62
        h = int(math.floor(math.log(_Q_MAX / self.eta, self.base)))
        while h > 0 and _raw_q(h, self) > _Q_MAX:
            h -= 1
        return h

    def with_dim(self, n: int) -> ScheduleConfig:
        return replace(self, n=int(n))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SchedulerState:
    t: int
    h_bar: int
    q_p: int
    sup_h: float
    inf_h: float
    violations: int = 0

    def sigma(self, n: int) -> float:
        return noise_floor(n, self.q_p)


def sigma_infimum(t: int, C: float) -> float:
    """Theorem noise floor ``C / ln(t + 2)``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return C / math.log(t + 2)


def sup_h_bar(t, config: ScheduleConfig) -> float:
    arg = config.n * math.log(t + 2) / (24.0 * config.eta**2 * config.C)
    return 0.5 * math.log(arg) / math.log(config.base)


def inf_h_bar(t, config: ScheduleConfig) -> float:
    return sup_h_bar(t, config) - config.beta / (t + 2)


def _raw_q(h_bar: int, config: ScheduleConfig) -> int:
    if config.exact_powers:
        return int(config.base) ** int(h_bar)
    return int(round(config.eta * config.base ** int(h_bar)))


def q_p_of(h_bar: int, config: ScheduleConfig) -> int:
    """Lattice denominator for exponent ``h_bar``; exact when eta=1 and b is an integer."""
    if h_bar > config.max_exponent:
        raise ScheduleOverflowError(
            f"h_bar={h_bar} exceeds the maximum exponent {config.max_exponent}"
        )
    q = _raw_q(h_bar, config)
    if q < 1:
        raise ValueError(f"q_p_of({h_bar}) = {q} < 1")
    return q


def noise_floor(n: int, q_p: int) -> float:
    """``sigma = sqrt(n/24) / q_p``."""
    return math.sqrt(n / 24.0) / q_p


def _state(t: int, h_bar: int, config: ScheduleConfig, violations: int) -> SchedulerState:
    return SchedulerState(
        t=t,
        h_bar=h_bar,
        q_p=q_p_of(h_bar, config),
        sup_h=sup_h_bar(t, config),
        inf_h=inf_h_bar(t, config),
        violations=violations,
    )


def check_bound(state: SchedulerState, config: ScheduleConfig) -> SchedulerState:
    """Raise ``h_bar`` one step at a time until it clears the inf bound."""
    if config.enforcement == "off":
        return state
    h = state.h_bar
    inf_h = inf_h_bar(state.t, config)
    sup_h = sup_h_bar(state.t, config)
    violations = state.violations
    cap = config.max_exponent
    while h < inf_h:
        if h + 1 > cap:
            if config.enforcement == "strict":
                raise ScheduleOverflowError(
                    f"t={state.t}: inf bound {inf_h:.4g} needs h_bar above the cap {cap}"
                )
            break
        h += 1
        violations += 1
    if config.enforcement == "strict" and h > sup_h:
        raise ScheduleViolationError(
            f"t={state.t}: h_bar={h} exceeds the sup bound {sup_h:.4g}"
        )
    if h == state.h_bar and violations == state.violations:
        return replace(state, sup_h=sup_h, inf_h=inf_h)
    return _state(state.t, h, config, violations)


def initial_state(config: ScheduleConfig) -> SchedulerState:
    """State at ``t = 0`` with the bound check already applied."""
    return check_bound(_state(0, int(config.h_bar0), config, 0), config)


def advance_epoch(state: SchedulerState, config: ScheduleConfig) -> SchedulerState:
    nxt = SchedulerState(
        t=state.t + 1,
        h_bar=state.h_bar,
        q_p=state.q_p,
        sup_h=sup_h_bar(state.t + 1, config),
        inf_h=inf_h_bar(state.t + 1, config),
        violations=state.violations,
    )
    return check_bound(nxt, config)


def raise_resolution(state: SchedulerState, config: ScheduleConfig, steps: int = 1) -> SchedulerState:
    return _state(state.t, state.h_bar + steps, config, state.violations)


def rescue_ceiling(state: SchedulerState, config: ScheduleConfig) -> float:
    """Highest exponent the vanishing-gradient rescue may reach.

    Strict mode honours the sup bound; otherwise only the overflow cap applies.
    """
    cap = float(config.max_exponent)
    if config.enforcement == "strict":
        return min(cap, state.sup_h)
    return cap


def trajectory(config: ScheduleConfig, horizon: int) -> list[dict]:
    """Rows of ``(t, h_bar, q_p, sigma, inf_sigma, sup_h, inf_h, violations)``."""
    state = initial_state(config)
    rows = []
    for t in range(horizon + 1):
        if t:
            state = advance_epoch(state, config)
        rows.append(
            {
                "t": state.t,
                "h_bar": state.h_bar,
                "q_p": state.q_p,
                "sigma": noise_floor(config.n, state.q_p),
                "inf_sigma": sigma_infimum(state.t, config.C),
                "sup_h": state.sup_h,
                "inf_h": state.inf_h,
                "violations": state.violations,
            }
        )
    return rows
