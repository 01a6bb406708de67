"""Command-line entry point: ``qlearn {optimize,schedule,wnh,sde,aggregate}``.

Output goes to ``--out``, else ``$QLEARN_OUT/<config name>``, else
``./qlearn-out/<config name>``.

Exit codes: 0 success (for ``wnh``: hypothesis not rejected), 1 WNH
rejected, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, parse_seeds
from .errors import ConfigError, InsufficientDataError, QLearnError
from .harness import MixedConfigError, aggregate, run_sweep
from .objectives import make_objective
from .schedule import trajectory
from .wnh import WnhConfig, load_vectors, quantization_errors, wnh_test

log = logging.getLogger("qlearn")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE = 0, 1, 2


def _out_dir(args, cfg: ExperimentConfig | None, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    name = cfg.name if cfg is not None else default_name
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    root = os.environ.get("QLEARN_OUT")
    return Path(root) / name if root else Path("qlearn-out") / name


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=parse_seeds(args.seeds))
    if getattr(args, "strict", False):
        cfg = replace(cfg, schedule=replace(cfg.schedule, enforcement="strict"))
    return cfg


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_optimize(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg, "optimize")
    table = run_sweep(cfg, out, jobs=args.jobs)
    n_runs = sum(r.seeds + r.failed for r in table.rows)
    log.info("%d runs, %d failed; summary in %s", n_runs, len(table.failures), out)
    print(table.to_markdown())
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = _load(args)
    horizon = args.horizon if args.horizon is not None else cfg.horizon
    out = _out_dir(args, cfg, "schedule")
    out.mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule
    if args.dim:
        sched = sched.with_dim(args.dim)
    rows = trajectory(sched, horizon)
    path = out / "schedule.csv"
    _write_csv(path, rows)
    (out / "schedule_meta.json").write_text(json.dumps({"schedule": sched.to_dict(), "horizon": horizon}, indent=2) + "\n")
    print(path)
    return EXIT_OK


def cmd_wnh(args) -> int:
    level = args.level
    wcfg = WnhConfig(significance=level)
    if args.generate:
        kind, _, rest = args.generate.partition(":")
        if kind != "uniform":
            raise ConfigError(f"unknown generator {kind!r}; only 'uniform[:count[:seed]]' is built in")
        parts = rest.split(":") if rest else []
        count = int(float(parts[0])) if parts else 1_000_000
        seed = int(parts[1]) if len(parts) > 1 else 0
        x = np.random.default_rng(seed).uniform(-1000.0, 1000.0, size=count)
        skipped = 0
        source = {"generator": "uniform", "count": count, "seed": seed, "low": -1000.0, "high": 1000.0}
    else:
        x, skipped = load_vectors(args.input, strict=args.strict)
        source = {"input": str(args.input), "skipped_rows": skipped}
    errors = x if args.values == "errors" else quantization_errors(x, args.q_p)
    report = wnh_test(errors, wcfg)
    doc = json.loads(report.to_json())
    doc["source"] = source
    doc["q_p"] = args.q_p
    doc["values"] = args.values
    out = _out_dir(args, None, "wnh")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "wnh_report.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    if skipped:
        log.warning("skipped %d malformed rows", skipped)
    print(f"{'pass' if report.passed else 'fail'} {path}")
    return EXIT_OK if report.passed else EXIT_REJECTED


def cmd_sde(args) -> int:
    from .sde import (SdeSpec, annealed_sigma, compare_optimizer_to_sde, constant_sigma,
                      sde_for_optimizer, simulate_ensemble)

    cfg = _load(args)
    s = cfg.sde
    if s is None:
        raise ConfigError(f"{args.config}: the sde subcommand needs an 'sde' section")
    out = _out_dir(args, cfg, "sde")
    out.mkdir(parents=True, exist_ok=True)
    obj = make_objective(cfg.objective, **cfg.objective_kwargs())
    horizon = cfg.epochs * cfg.steps_per_epoch
    basin = (lambda W, b=s.basin_below: W[:, 0] < b) if s.basin_below is not None else None
    init = None
    if s.start is None:
        init = obj.sample_start
    written = {}

    def dump(arm, res):
        rows = res.summary_rows()
        _write_csv(out / f"ensemble_{arm}.csv", rows)
        np.savetxt(out / f"terminal_{arm}.csv", res.terminal, delimiter=",", header=",".join(f"w{j}" for j in range(obj.dim)), comments="")
        meta = {"arm": arm, "paths": res.paths, "diverged": int(res.diverged.sum()),
                "seed_ledger": res.seed_ledger}
        if res.basin_fraction is not None:
            meta["basin_fraction_final"] = float(res.basin_fraction[-1])
            meta["basin_fraction_initial"] = float(res.basin_fraction[0])
        (out / f"ensemble_{arm}.json").write_text(json.dumps(meta, indent=2) + "\n")
        written[arm] = meta

    lr = cfg.learning_rates[0]
    kind = cfg.algorithms[0]
    if s.compare:
        spec = sde_for_optimizer(obj, lr, schedule=cfg.schedule, fixed_q_p=s.fixed_q_p, horizon=horizon,
                                 N=s.N, preset=s.preset, gain=s.gain)
        opt_cfg = cfg.optimizer_config(kind, cfg.quantize[0], lr)
        if s.fixed_q_p is not None:
            # hold Q_p where the SDE holds it
            h = int(round(np.log(s.fixed_q_p) / np.log(cfg.schedule.base)))
            opt_cfg = replace(opt_cfg, rescue=False, vanish_patience=None,
                              schedule=replace(cfg.schedule, h_bar0=h, enforcement="off"))
        else:
            opt_cfg = replace(opt_cfg, vanish_patience=None)
        start_init = (lambda rng, w=np.array(s.start): w.copy()) if s.start is not None else init
        report, _opt, res = compare_optimizer_to_sde(obj, opt_cfg, spec, s.paths, s.seed, init=start_init,
                                                     stationary_from=s.stationary_from, basin=basin)
        (out / "divergence_report.json").write_text(report.to_json(indent=2) + "\n")
        dump("matched", res)
    for arm, sigma in (("annealed", s.annealed_c), ("constant", s.constant_sigma)):
        if sigma is None:
            continue
        diff = annealed_sigma(sigma) if arm == "annealed" else constant_sigma(sigma)
        gb = obj.grad_batch
        spec = SdeSpec(drift=lambda W, a=float(lr): -a * gb(W), diffusion_scale=diff, dim=obj.dim,
                       dt=1.0 / s.N, horizon=horizon, label=arm)
        res = simulate_ensemble(spec, s.paths, s.seed, w0=s.start, init=None if s.start else init, basin=basin)
        dump(arm, res)
    print(json.dumps({k: {kk: v for kk, v in m.items() if kk != "seed_ledger"} for k, m in written.items()}))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    table = aggregate(args.directory)
    out = Path(args.out) if args.out else Path(args.directory)
    table.write(out)
    print(table.to_markdown())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlearn", description="Quantization-based optimization experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="YAML or JSON experiment config")
        sp.add_argument("--out", help="output directory (default: $QLEARN_OUT/<name>)")
        sp.add_argument("--strict", action="store_true",
                        help="strict schedule enforcement; for wnh, fail on malformed rows")

    sp = sub.add_parser("optimize", help="run the algorithm x learning-rate x seed sweep")
    common(sp)
    sp.add_argument("--seeds", help="override seeds, e.g. 0-9 or 1,3,5")
    sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: all CPUs)")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("schedule", help="write the Q_p / sigma trajectory")
    common(sp)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--dim", type=int, help="problem dimension n used in sigma and the h_bar bounds")
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("wnh", help="test quantization errors against the white-noise hypothesis")
    common(sp, config=False)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help=".npy, CSV or whitespace-separated file")
    src.add_argument("--generate", help="built-in generator, uniform[:count[:seed]]")
    sp.add_argument("--level", type=float, default=0.01, help="significance level")
    sp.add_argument("--q-p", type=int, default=1, dest="q_p")
    sp.add_argument("--values", choices=("inputs", "errors"), default="inputs",
                    help="whether the data are inputs to quantize or errors already")
    sp.set_defaults(func=cmd_wnh)

    sp = sub.add_parser("sde", help="Euler-Maruyama ensembles and optimizer comparison")
    common(sp)
    sp.add_argument("--seeds", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_sde)

    sp = sub.add_parser("aggregate", help="summarize a directory of run records")
    sp.add_argument("directory")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, MixedConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, QLearnError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
