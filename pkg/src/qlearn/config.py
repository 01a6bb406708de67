"""Experiment configuration files (YAML or JSON).

Layout, version 1::

    schema_version: 1
    name: quadratic-smoke
    objective:
      name: quadratic          # quadratic | double_well | rastrigin | ackley | mlp
      params: {n: 2}
    optimizer:
      algorithms: [sgd, adam]
      quantize: [true, false]
      learning_rates: {halving: {start: 0.25, count: 9}}   # or a list
      epochs: 100
      steps_per_epoch: 1
      batch_size: 32           # mlp only
      rescue: true
      grad_tol: 0.0
      vanish_patience: 10
      lattice_check_every: 100
      eval_every: 0
    schedule: {eta: 1, base: 2, h_bar0: 2, C: 1.0e6, beta: 20, enforcement: clamped,
               per_minibatch: false, h_max: null, horizon: 100}
    seeds: [0, 1, 2]           # or {start: 0, count: 10}
    out: results/quadratic     # optional
    sde: {...}                 # optional, see SdeSection

Unknown keys are errors and are reported with their line number.
Learning rates are stored as exact fractions (``"1/1024"``) so a config
round-trips through :meth:`ExperimentConfig.to_dict` without loss.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import yaml

from .core import ALGORITHMS, OptimizerConfig, as_rational
from .errors import ConfigError
from .schedule import ScheduleConfig

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "SdeSection",
    "load_config",
    "parse_config",
    "dump_config",
    "halving_rates",
    "parse_seeds",
]

SCHEMA_VERSION = 1

_TOP = {"schema_version", "name", "objective", "optimizer", "schedule", "seeds", "out", "sde"}
_OBJECTIVE = {"name", "params"}
_OPTIMIZER = {
    "algorithms", "quantize", "learning_rates", "epochs", "steps_per_epoch", "batch_size",
    "rescue", "grad_tol", "vanish_patience", "lattice_check_every", "eval_every",
    "beta1", "beta2", "eps_adam",
}
_SCHEDULE = {f.name for f in fields(ScheduleConfig)} - {"n"} | {"horizon"}
_SDE = {
    "paths", "seed", "N", "preset", "gain", "fixed_q_p", "stationary_from", "compare",
    "annealed_c", "constant_sigma", "basin_below", "start",
}
_SECTIONS = {"objective": _OBJECTIVE, "optimizer": _OPTIMIZER, "schedule": _SCHEDULE, "sde": _SDE}


class _Loader(yaml.SafeLoader):
    """Safe loader with YAML 1.2 scalars: ``1e6`` is a float and only
    ``true``/``false`` are booleans, so ``enforcement: off`` stays a string."""


# copy before editing so the stock SafeLoader keeps its resolvers
_Loader.yaml_implicit_resolvers = {
    k: [(tag, rx) for tag, rx in v if tag != "tag:yaml.org,2002:bool"]
    for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:bool",
    re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"),
    list("tTfF"),
)

_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def halving_rates(start: float = 0.25, count: int = 9) -> tuple[Fraction, ...]:
    """``start, start/2, ...``: the default grid is 1/4 down to 1/1024."""
    s = as_rational(start)
    return tuple(s / 2**i for i in range(int(count)))


def parse_seeds(spec) -> tuple[int, ...]:
    """Seeds from a list, ``{start, count}``, or a string like ``"0-9"`` / ``"1,4,7"``."""
    if isinstance(spec, dict):
        start, count = int(spec.get("start", 0)), int(spec["count"])
        return tuple(range(start, start + count))
    if isinstance(spec, str):
        out = []
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
        return tuple(out)
    if isinstance(spec, int):
        return (spec,)
    return tuple(int(s) for s in spec)


@dataclass(frozen=True)
class SdeSection:
    """Settings for the ``sde`` subcommand.

    ``compare`` runs the optimizer-matched arm against real optimizer runs;
    ``annealed_c`` and ``constant_sigma`` add the two fixed-shape arms.
    ``basin_below`` counts paths with first coordinate below it; ``start``
    pins the initial point (otherwise each path samples from the objective).
    """

    paths: int = 1000
    seed: int = 0
    N: int = 1
    preset: str = "uniform"
    gain: float = 1.0
    fixed_q_p: int | None = None
    stationary_from: int | None = None
    compare: bool = True
    annealed_c: float | None = None
    constant_sigma: float | None = None
    basin_below: float | None = None
    start: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.paths < 1:
            raise ConfigError("sde.paths must be >= 1")
        if self.N < 1:
            raise ConfigError("sde.N must be >= 1")
        if self.preset not in ("uniform", "floor"):
            raise ConfigError("sde.preset must be 'uniform' or 'floor'")
        if self.start is not None:
            object.__setattr__(self, "start", tuple(float(v) for v in self.start))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    objective: str = "quadratic"
    objective_params: dict = field(default_factory=dict)
    algorithms: tuple[str, ...] = ("sgd",)
    quantize: tuple[bool, ...] = (True,)
    learning_rates: tuple[Fraction, ...] = (Fraction(1, 10),)
    epochs: int = 100
    steps_per_epoch: int = 1
    batch_size: int | None = None
    rescue: bool = True
    grad_tol: float = 0.0
    vanish_patience: int | None = 10
    lattice_check_every: int = 100
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    horizon: int = 100
    seeds: tuple[int, ...] = (0,)
    out: str | None = None
    sde: SdeSection | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("algorithms", tuple(str(a).lower() for a in self.algorithms))
        set_("quantize", tuple(bool(q) for q in self.quantize))
        set_("seeds", tuple(int(s) for s in self.seeds))
        rates = []
        for lr in self.learning_rates:
            try:
                frac = as_rational(lr)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad learning rate {lr!r}: {exc}") from None
            if frac >= 1:
                raise ConfigError(f"learning rates must lie in (0, 1), got {frac}")
            rates.append(frac)
        set_("learning_rates", tuple(rates))
        set_("objective_params", dict(self.objective_params))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.learning_rates:
            raise ConfigError("at least one learning rate is required")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"algorithms must be drawn from {ALGORITHMS}, got {list(self.algorithms)}")
        if not self.quantize:
            raise ConfigError("quantize must list at least one of true/false")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.horizon < 0:
            raise ConfigError("epochs and horizon must be >= 0, steps_per_epoch >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def optimizer_config(self, kind: str, quantize: bool, lr) -> OptimizerConfig:
        return OptimizerConfig(
            kind=kind, lr=lr, quantize=quantize, rescue=self.rescue, schedule=self.schedule,
            epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, grad_tol=self.grad_tol,
            vanish_patience=self.vanish_patience, beta1=self.beta1, beta2=self.beta2,
            eps_adam=self.eps_adam, lattice_check_every=self.lattice_check_every,
            eval_every=self.eval_every,
        )

    def objective_kwargs(self) -> dict:
        kw = dict(self.objective_params)
        if self.batch_size is not None and self.objective == "mlp":
            kw["batch_size"] = self.batch_size
        return kw

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        sched = self.schedule.to_dict()
        sched.pop("n")
        sched["horizon"] = self.horizon
        d = {
            "schema_version": self.schema_version,
            "name": self.name,
            "objective": {"name": self.objective, "params": dict(self.objective_params)},
            "optimizer": {
                "algorithms": list(self.algorithms),
                "quantize": list(self.quantize),
                "learning_rates": [str(lr) for lr in self.learning_rates],
                "epochs": self.epochs,
                "steps_per_epoch": self.steps_per_epoch,
                "batch_size": self.batch_size,
                "rescue": self.rescue,
                "grad_tol": self.grad_tol,
                "vanish_patience": self.vanish_patience,
                "lattice_check_every": self.lattice_check_every,
                "eval_every": self.eval_every,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "eps_adam": self.eps_adam,
            },
            "schedule": sched,
            "seeds": list(self.seeds),
            "out": self.out,
        }
        if self.sde is not None:
            s = {f.name: getattr(self.sde, f.name) for f in fields(SdeSection)}
            if s["start"] is not None:
                s["start"] = list(s["start"])
            d["sde"] = s
        return d


def _check_keys(node, allowed: set[str], where: str, source: str, errors: list[str]) -> None:
    if not isinstance(node, yaml.MappingNode):
        errors.append(f"{source}:{node.start_mark.line + 1}: section {where!r} must be a mapping")
        return
    seen = set()
    for key, _value in node.value:
        k = key.value
        line = key.start_mark.line + 1
        if k in seen:
            errors.append(f"{source}:{line}: duplicate key {k!r} in {where}")
        seen.add(k)
        if k not in allowed:
            errors.append(f"{source}:{line}: unknown key {k!r} in {where}; allowed: {', '.join(sorted(allowed))}")


def _validate_tree(text: str, source: str) -> None:
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}" if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: cannot parse config: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        raise ConfigError(f"{source}: config is empty")
    errors: list[str] = []
    _check_keys(root, _TOP, "top level", source, errors)
    if isinstance(root, yaml.MappingNode):
        for key, value in root.value:
            if key.value in _SECTIONS and not (isinstance(value, yaml.ScalarNode) and value.value in ("", "null", "~")):
                _check_keys(value, _SECTIONS[key.value], key.value, source, errors)
    if errors:
        raise ConfigError("\n".join(errors))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse YAML or JSON text; every problem is reported as ``source:line: message``."""
    _validate_tree(text, source)
    raw = yaml.load(text, Loader=_Loader)  # noqa: S506 - safe loader subclass
    if "schema_version" not in raw:
        raise ConfigError(f"{source}:1: missing schema_version header (expected {SCHEMA_VERSION})")
    try:
        return _from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{source}: invalid value: {exc}") from None


def _from_dict(raw: dict) -> ExperimentConfig:
    obj = raw.get("objective") or {}
    opt = dict(raw.get("optimizer") or {})
    sched = dict(raw.get("schedule") or {})
    horizon = sched.pop("horizon", 100)
    lrs = opt.pop("learning_rates", ["1/10"])
    if isinstance(lrs, dict):
        if set(lrs) != {"halving"}:
            raise ConfigError("learning_rates mapping must be {halving: {start, count}}")
        lrs = halving_rates(**lrs["halving"])
    elif not isinstance(lrs, (list, tuple)):
        lrs = [lrs]
    lrs = [Fraction(v) if isinstance(v, str) else v for v in lrs]
    algs = opt.pop("algorithms", ["sgd"])
    quant = opt.pop("quantize", [True])
    sde = raw.get("sde")
    return ExperimentConfig(
        schema_version=raw["schema_version"],
        name=str(raw.get("name", "experiment")),
        objective=str(obj.get("name", "quadratic")),
        objective_params=dict(obj.get("params") or {}),
        algorithms=tuple([algs] if isinstance(algs, str) else algs),
        quantize=tuple([quant] if isinstance(quant, bool) else quant),
        learning_rates=tuple(lrs),
        schedule=ScheduleConfig(**sched),
        horizon=int(horizon),
        seeds=parse_seeds(raw.get("seeds", [0])),
        out=raw.get("out"),
        sde=SdeSection(**sde) if sde else None,
        **opt,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def dump_config(config: ExperimentConfig, fmt: str = "yaml") -> str:
    d = config.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2)
    return yaml.safe_dump(d, sort_keys=False)
