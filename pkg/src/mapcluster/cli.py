"""Command-line front end: ``mapcluster <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration error, 2 infeasible, 3 limit hit
without an incumbent.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bnb import BnbOptions, Status, Strategy, solve
from .constraints import ConstraintError, load_constraints, validate
from .formulation import build_miqp
from .heuristics import Schedule, em, em_multistart, kmeans_init, simulated_annealing
from .io import (
    DataError,
    avg_label_precision,
    load_csv,
    prep_iris1d,
    read_result,
    solution_fields,
    solution_from_result,
    write_csv,
    write_result,
    write_trace,
)
from .model import ContractError, ProblemSpec, conditional_params, solution_metrics
from .oracle import OracleSizeError, brute_force

log = logging.getLogger("mapcluster")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NO_INCUMBENT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: Optional[str] = None
    k: Optional[int] = None
    sigma: Optional[float] = None
    precision_file: Optional[str] = None
    precision: Optional[str] = None
    bounds: Optional[list] = None
    constraints: Optional[str] = None
    breakpoints: int = 64
    pi_min: float = 1e-3
    epsilon: float = 1e-4
    time_limit: Optional[float] = None
    node_limit: Optional[int] = None
    strategy: str = Strategy.MOST_INFEASIBLE.value
    workers: int = 1
    deterministic: bool = False
    seed: int = 0
    out: Optional[str] = None
    trace: Optional[str] = None

    def check(self, needs_model=True):
        if self.data is None or not Path(self.data).is_file():
            raise ConfigError(f"data file not found: {self.data}")
        for name in ("precision_file", "constraints"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name.replace('_', '-')} file not found: {p}")
        if not needs_model:
            return
        if self.k is None or self.k < 1:
            raise ConfigError("--k must be a positive integer")
        chosen = [x is not None for x in (self.sigma, self.precision_file, self.precision)]
        if sum(chosen) != 1:
            raise ConfigError("give exactly one of --sigma, --precision-file, --precision avg-labels")
        if self.precision is not None and self.precision != "avg-labels":
            raise ConfigError("--precision only accepts 'avg-labels'")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("--sigma must be positive")
        if not self.epsilon > 0:
            raise ConfigError("--epsilon must be positive")
        if self.workers < 1:
            raise ConfigError("--workers must be >= 1")


def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--data", help="input CSV")
    p.add_argument("--out", help="result file (default: stdout)")
    p.add_argument("--seed", type=int)
    if not model:
        return
    p.add_argument("--k", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sigma", type=float, help="shared isotropic standard deviation")
    g.add_argument("--precision-file", help="whitespace-separated d x d precision matrix")
    g.add_argument("--precision", choices=["avg-labels"], help="inverse pooled within-label covariance")
    p.add_argument("--bounds", type=float, nargs=2, metavar=("LO", "HI"), help="mean box override")
    p.add_argument("--constraints", help="JSON constraint file (1-based indices)")
    p.add_argument("--breakpoints", type=int)
    p.add_argument("--pi-min", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mapcluster", description="Global MAP clustering for Gaussian mixtures.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="branch-and-bound global solve")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--time-limit", type=float)
    p.add_argument("--node-limit", type=int)
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--workers", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--trace", help="trace CSV output")

    p = sub.add_parser("em", help="single EM run from K-means")
    _common(p)
    p.add_argument("--max-iter", type=int, default=500)

    p = sub.add_parser("em-multi", help="multi-restart EM")
    _common(p)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--time-budget", type=float)

    p = sub.add_parser("sa", help="simulated annealing over assignments")
    _common(p)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--t0", type=float)
    p.add_argument("--decay", type=float, default=0.995)

    p = sub.add_parser("oracle", help="exhaustive enumeration (tiny instances)")
    _common(p)

    p = sub.add_parser("metrics", help="compare a result to a truth record")
    p.add_argument("--result", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")

    p = sub.add_parser("prep", help="write the 1-d iris projection as CSV")
    p.add_argument("--data", help="iris CSV (default: bundled copy)")
    p.add_argument("--per-class", type=int, help="keep the first N samples of each class")
    p.add_argument("--out", required=True)
    return ap


def _config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file: {e}") from None
    for key in RunConfig.__dataclass_fields__:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    unknown = set(values) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


def _problem(cfg: RunConfig):
    data = load_csv(cfg.data)
    if cfg.sigma is not None:
        precision = 1.0 / (2.0 * cfg.sigma**2)
    elif cfg.precision_file is not None:
        precision = np.atleast_2d(np.loadtxt(cfg.precision_file, dtype=float))
    else:
        precision = avg_label_precision(data)
    kw = {"pi_floor": cfg.pi_min, "breakpoints": cfg.breakpoints}
    if cfg.bounds is not None:
        lo, hi = cfg.bounds
        kw["mu_lower"] = np.full((cfg.k, data.d), lo)
        kw["mu_upper"] = np.full((cfg.k, data.d), hi)
    spec = ProblemSpec.from_data(data, cfg.k, precision, **kw)
    cons = load_constraints(cfg.constraints, cfg.k) if cfg.constraints else []
    return data, spec, cons


def _echo(cfg: RunConfig) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k not in ("out", "trace")}


def _heuristic_record(cfg, status, sol, t0) -> dict:
    rec = {"status": status, "glbd": None, "true_glbd": None, "gap": None, "e_max": None, "nodes": 0,
           "seed": cfg.seed, "config": _echo(cfg), "wall_seconds": time.perf_counter() - t0}
    rec.update(solution_fields(sol))
    return rec


def run(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    cmd = args.command
    if cmd == "prep":
        data = prep_iris1d(args.data, args.per_class)
        write_csv(data, args.out, ["pc1"])
        return EXIT_OK
    if cmd == "metrics":
        est = solution_from_result(read_result(args.result))
        truth = solution_from_result(read_result(args.truth))
        m = solution_metrics(est, truth)
        write_result(args.out, {"pi_sup": m.pi_sup, "mu_l2": m.mu_l2, "z_sup_mean": m.z_sup_mean,
                                "matching": [int(j) + 1 for j in m.matching]})
        return EXIT_OK

    cfg = _config(args)
    cfg.check()
    data, spec, cons = _problem(cfg)

    if cmd == "solve":
        model = build_miqp(data, spec, cons)
        opts = BnbOptions(
            epsilon=cfg.epsilon,
            time_limit=cfg.time_limit if cfg.time_limit is not None else float("inf"),
            node_limit=cfg.node_limit,
            strategy=Strategy(cfg.strategy),
            workers=cfg.workers,
            deterministic=cfg.deterministic,
            seed=cfg.seed,
        )
        res = solve(model, opts)
        rec = {"status": res.status.value, "glbd": res.glbd, "true_glbd": res.true_glbd, "gap": res.gap,
               "e_max": res.e_max, "nodes": res.nodes_explored, "nodes_fathomed": res.nodes_fathomed,
               "seed": cfg.seed, "config": _echo(cfg), "wall_seconds": res.wall_seconds}
        if model.validation is not None and not model.validation.ok:
            rec["conflicts"] = [str(c) for c in model.validation.conflicts]
        rec.update(solution_fields(res.incumbent))
        if res.incumbent is None:
            rec["objective_ubd"] = None
        write_result(cfg.out, rec)
        if cfg.trace:
            write_trace(cfg.trace, res.trace)
        if res.status is Status.INFEASIBLE:
            return EXIT_INFEASIBLE
        if res.status is Status.NO_INCUMBENT:
            return EXIT_NO_INCUMBENT
        return EXIT_OK

    if cmd == "oracle":
        report = validate(cons, data, spec.K)
        sol = brute_force(data, spec, cons) if report.ok else None
        write_result(cfg.out, _heuristic_record(cfg, "Optimal" if sol else "Infeasible", sol, t0))
        return EXIT_OK if sol else EXIT_INFEASIBLE

    if cmd == "em":
        a = kmeans_init(data, spec.K, cfg.seed)
        soft, sol = em(data, spec, conditional_params(data, spec, a), max_iter=args.max_iter, constraints=cons)
        rec = _heuristic_record(cfg, "Feasible" if sol else "RepairFailed", sol, t0)
        rec["iterations"] = soft.iterations
        rec["loglik"] = soft.loglik_trace[-1]
        write_result(cfg.out, rec)
        return EXIT_OK if sol else EXIT_INFEASIBLE

    if cmd == "em-multi":
        sol = em_multistart(data, spec, args.restarts, cfg.seed, args.time_budget, cons)
        write_result(cfg.out, _heuristic_record(cfg, "Feasible" if sol else "RepairFailed", sol, t0))
        return EXIT_OK if sol else EXIT_INFEASIBLE

    if cmd == "sa":
        sched = Schedule(args.t0, args.decay, args.steps)
        try:
            sol = simulated_annealing(data, spec, cons, sched, cfg.seed)
        except ContractError as e:
            log.error("%s", e)
            write_result(cfg.out, _heuristic_record(cfg, "Infeasible", None, t0))
            return EXIT_INFEASIBLE
        write_result(cfg.out, _heuristic_record(cfg, "Feasible", sol, t0))
        return EXIT_OK
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, DataError, ConstraintError, ContractError, OracleSizeError, OSError, ValueError) as e:
        print(f"mapcluster: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
