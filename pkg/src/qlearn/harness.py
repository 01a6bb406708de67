"""Sweep runner and result aggregation.

A sweep is the product algorithm x quantize x learning rate x seed.  Every
run writes ``runs/<run_id>.json`` (metadata, metrics, status) and
``runs/<run_id>.csv`` (per-step trace).  :func:`aggregate` reads those
files back, so a summary can always be recomputed from disk.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .core import TRACE_COLUMNS, config_hash, run
from .objectives import Objective, make_objective

__all__ = [
    "RunSpec",
    "SummaryRow",
    "SummaryTable",
    "sweep_plan",
    "execute",
    "run_sweep",
    "aggregate",
    "write_record",
    "MixedConfigError",
    "ALGORITHM_ORDER",
]

ALGORITHM_ORDER = ("SGD", "QSGD", "ADAM", "QtADAM")


class MixedConfigError(ValueError):
    """Run records in one directory come from different sweeps."""


@dataclass(frozen=True)
class RunSpec:
    kind: str
    quantize: bool
    lr: Fraction
    seed: int

    @property
    def label(self) -> str:
        base = "ADAM" if self.kind == "adam" else "SGD"
        if not self.quantize:
            return base
        return "QtADAM" if self.kind == "adam" else "QSGD"

    @property
    def run_id(self) -> str:
        lr = f"{self.lr.numerator}-{self.lr.denominator}"
        return f"{self.label}_lr{lr}_seed{self.seed}"


def sweep_plan(cfg: ExperimentConfig) -> list[RunSpec]:
    return [
        RunSpec(kind, quant, lr, seed)
        for kind in cfg.algorithms
        for quant in cfg.quantize
        for lr in cfg.learning_rates
        for seed in cfg.seeds
    ]


@lru_cache(maxsize=8)
def _objective(name: str, params_json: str) -> Objective:
    return make_objective(name, **json.loads(params_json))


def _sweep_key(cfg: ExperimentConfig) -> dict:
    """Everything shared by all runs of one sweep."""
    d = cfg.to_dict()
    for k in ("algorithms", "quantize", "learning_rates"):
        d["optimizer"].pop(k)
    d.pop("seeds")
    d.pop("out")
    d.pop("name")
    d.pop("sde", None)
    return d


def execute(cfg: ExperimentConfig, spec: RunSpec) -> dict:
    """One run end to end.  Never raises: failures come back as failure rows."""
    opt_cfg = cfg.optimizer_config(spec.kind, spec.quantize, spec.lr)
    doc = {
        "run_id": spec.run_id,
        "algorithm": spec.label,
        "lr": str(spec.lr),
        "seed": spec.seed,
        "sweep_hash": config_hash(_sweep_key(cfg)),
        "objective": {"name": cfg.objective, "params": cfg.objective_kwargs()},
    }
    try:
        obj = _objective(cfg.objective, json.dumps(cfg.objective_kwargs(), sort_keys=True))
        rec = run(obj, opt_cfg, spec.seed)
    except Exception as exc:  # noqa: BLE001 - one bad run must not end the sweep
        doc.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                   traceback=traceback.format_exc(limit=3), metrics={}, trace=None)
        return doc
    doc.update(rec.meta())
    doc["objective"] = {"name": cfg.objective, "params": cfg.objective_kwargs()}
    doc["trace"] = rec.trace
    return doc


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_record(doc: dict, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    trace = doc.pop("trace", None)
    # timing goes last and is the only field expected to differ between reruns
    timing = {"wall_time": doc.pop("wall_time", None)}
    body = dict(doc, timing=timing)
    (run_dir / f"{doc['run_id']}.json").write_text(
        json.dumps(_clean(body), indent=2, default=_json_default) + "\n")
    if trace is not None:
        with open(run_dir / f"{doc['run_id']}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRACE_COLUMNS)
            for row in zip(*(trace[c] for c in TRACE_COLUMNS)):
                wr.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _worker(args):
    cfg, spec = args
    return execute(cfg, spec)


def run_sweep(cfg: ExperimentConfig, out_dir, jobs: int | None = None) -> SummaryTable:
    """Run the full sweep, write per-run files, then the summary.

    ``jobs=None`` uses every available CPU.  Per-run files are written by the
    parent in plan order, so serial and parallel sweeps give identical files
    (up to timing fields).
    """
    out = Path(out_dir)
    run_dir = out / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    plan = sweep_plan(cfg)
    if jobs is None:
        jobs = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    jobs = max(1, min(int(jobs), len(plan)))
    if jobs == 1:
        for spec in plan:
            write_record(execute(cfg, spec), run_dir)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for doc in pool.map(_worker, [(cfg, s) for s in plan], chunksize=max(1, len(plan) // (4 * jobs))):
                write_record(doc, run_dir)
    table = aggregate(run_dir)
    table.write(out)
    return table


@dataclass
class SummaryRow:
    algorithm: str
    lr: str
    train_mean: float
    test_mean: float
    train_std: float
    test_std: float
    seeds: int
    failed: int
    train_values: list[float] = field(default_factory=list)
    test_values: list[float] = field(default_factory=list)
    best_test_mean: float | None = None

    @property
    def lr_value(self) -> float:
        return float(Fraction(self.lr))


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class SummaryTable:
    """Rows keyed by (algorithm, learning rate); std is the population std over seeds."""

    rows: list[SummaryRow]
    sweep_hash: str
    objective: dict
    failures: list[dict] = field(default_factory=list)

    def row(self, algorithm: str, lr) -> SummaryRow:
        key = str(Fraction(lr)) if not isinstance(lr, str) else lr
        for r in self.rows:
            if r.algorithm == algorithm and r.lr == key:
                return r
        raise KeyError((algorithm, lr))

    @property
    def algorithms(self) -> list[str]:
        present = {r.algorithm for r in self.rows}
        return [a for a in ALGORITHM_ORDER if a in present]

    @property
    def learning_rates(self) -> list[str]:
        return sorted({r.lr for r in self.rows}, key=lambda s: -Fraction(s))

    def wide(self) -> list[dict]:
        """Table layout: one line per learning rate, train/test per algorithm, then the average line."""
        lines = []
        for lr in self.learning_rates:
            line = {"lr": lr}
            for alg in self.algorithms:
                try:
                    r = self.row(alg, lr)
                except KeyError:
                    line[f"{alg}_train"] = line[f"{alg}_test"] = math.nan
                    continue
                line[f"{alg}_train"], line[f"{alg}_test"] = r.train_mean, r.test_mean
            lines.append(line)
        avg = {"lr": "Average"}
        for alg in self.algorithms:
            for split in ("train", "test"):
                col = [ln[f"{alg}_{split}"] for ln in lines]
                avg[f"{alg}_{split}"] = float(np.nanmean(col)) if np.any(np.isfinite(col)) else math.nan
        lines.append(avg)
        return lines

    def to_dict(self) -> dict:
        return {
            "sweep_hash": self.sweep_hash,
            "objective": self.objective,
            "std": "population (ddof=0) over successful seeds",
            "rows": [r.__dict__ for r in self.rows],
            "wide": self.wide(),
            "failures": self.failures,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(_clean(self.to_dict()), indent=2) + "\n")
        with open(out / "summary.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["algorithm", "lr", "train_mean", "test_mean", "train_std", "test_std",
                         "seeds", "failed", "best_test_mean"])
            for r in self.rows:
                wr.writerow([r.algorithm, r.lr, r.train_mean, r.test_mean, r.train_std, r.test_std,
                             r.seeds, r.failed, r.best_test_mean])
        wide = self.wide()
        with open(out / "summary_wide.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(wide[0]))
            wr.writeheader()
            wr.writerows(wide)

    def to_markdown(self) -> str:
        algs = self.algorithms
        # accuracies read best as percentages, objective values need significant digits
        fmt = ".2f" if self.objective.get("name") == "mlp" else ".4g"
        head = "| lr | " + " | ".join(f"{a} train | {a} test" for a in algs) + " |"
        sep = "|---" * (1 + 2 * len(algs)) + "|"
        body = []
        for line in self.wide():
            lr = line["lr"] if line["lr"] == "Average" else f"{float(Fraction(line['lr'])):.10g}"
            cells = [format(line[f"{a}_{s}"], fmt) for a in algs for s in ("train", "test")]
            body.append(f"| {lr} | " + " | ".join(cells) + " |")
        return "\n".join([head, sep, *body])


def aggregate(run_dir) -> SummaryTable:
    """Group run records by (algorithm, lr); mean/std of final train and test metrics.

    Raises :class:`MixedConfigError` if the records come from different sweeps.
    """
    run_dir = Path(run_dir)
    if (run_dir / "runs").is_dir():
        run_dir = run_dir / "runs"
    paths = sorted(run_dir.glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no run records in {run_dir}")
    docs = []
    for p in paths:
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{p}: malformed run record: {exc}") from None
        if "run_id" not in doc or "algorithm" not in doc:
            raise ValueError(f"{p}: not a run record")
        docs.append((p, doc))

    hashes: dict[str, list[str]] = {}
    for p, d in docs:
        hashes.setdefault(d.get("sweep_hash"), []).append(p.name)
    if len(hashes) > 1:
        major = max(hashes, key=lambda h: len(hashes[h]))
        offenders = sorted(n for h, names in hashes.items() if h != major for n in names)
        raise MixedConfigError(
            f"{len(hashes)} different sweep configs in {run_dir}; majority {major} "
            f"({len(hashes[major])} records); offenders: {', '.join(offenders)}")

    groups: dict[tuple[str, str], list[dict]] = {}
    for _, d in docs:
        groups.setdefault((d["algorithm"], d["lr"]), []).append(d)
    rows, failures = [], []
    order = {a: i for i, a in enumerate(ALGORITHM_ORDER)}
    for (alg, lr) in sorted(groups, key=lambda k: (order.get(k[0], 99), -Fraction(k[1]))):
        ds = sorted(groups[(alg, lr)], key=lambda d: d["seed"])
        ok = [d for d in ds if d.get("status") == "ok" and d.get("metrics")]
        for d in ds:
            if d not in ok:
                failures.append({"run_id": d["run_id"], "algorithm": alg, "lr": lr, "seed": d["seed"],
                                 "error": d.get("error")})
        train = [float(d["metrics"]["train"]) for d in ok]
        test = [float(d["metrics"]["test"]) for d in ok]
        best = [float(d["extra"]["best_metrics"]["test"]) for d in ok
                if d.get("extra", {}).get("best_metrics")]
        tm, ts = _mean_std(train)
        em, es = _mean_std(test)
        rows.append(SummaryRow(
            algorithm=alg, lr=lr, train_mean=tm, test_mean=em, train_std=ts, test_std=es,
            seeds=len(ok), failed=len(ds) - len(ok), train_values=train, test_values=test,
            best_test_mean=float(np.mean(best)) if best and len(best) == len(ok) else None,
        ))
    first = docs[0][1]
    return SummaryTable(rows=rows, sweep_hash=first.get("sweep_hash"), objective=first.get("objective", {}),
                        failures=failures)
