#!/usr/bin/env python3
"""
fair-mdp experiment harness

Plans, simulates and audits tabular MDPs, runs the chain lower-bound
scaling experiments and Fair-E3, and sweeps parameter grids into CSV.

Data (tables, JSON reports, CSV) goes to stdout or --out; status lines go
to stderr. Exit codes: 0 success or audit pass, 1 usage/input error,
2 audit failure.
"""

import argparse
import functools
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from fair_e3 import (
    FairE3Config,
    baseline_greedy_e3,
    baseline_uniform,
    run_fair_e3,
)
from fairness_audit import (
    DEFINITIONS,
    TIE_TOL,
    audit,
    delta_compliant,
    fair_optimal_policy,
)
from lowerbound_instances import (
    ChainSpec,
    action_fair_chain_length,
    choice_fair_chain_policy,
    coupling_experiment,
    growth_factor,
    make_chain,
    summarize_coupling,
)
from mdp_core import (
    MdpError,
    PLANNER_TOL,
    StochasticPolicy,
    UnichainViolation,
    greedy_policy,
    load_mdp,
    load_trace,
    simulate,
    split_seed,
    stationary_distribution,
    value_iteration,
)

try:
    from tqdm import tqdm
    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False

logger = logging.getLogger("fair_mdp.cli")

SCHEMA_HEADER = "# fair-mdp schema v1"
LOG_LEVEL = os.getenv("FAIR_MDP_LOG_LEVEL", "INFO").upper()
DEFAULT_JOBS = int(os.getenv("FAIR_MDP_JOBS", "1"))

SEED_RULE = (
    "Seeds: run i of a command uses seed (root_seed XOR i), passed to "
    "numpy.random.default_rng. Outputs are deterministic given flags and seeds."
)


class UsageError(Exception):
    pass


class HarnessParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {self.prog}: {message}", file=sys.stderr)
        sys.exit(1)


def status(message: str) -> None:
    print(message, file=sys.stderr)


# ----------------------------------------------------------------------------
# Output helpers


def write_csv(df: pd.DataFrame, path, timestamp: bool = True) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_HEADER + "\n")
        if timestamp:
            fh.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
        df.to_csv(fh, index=False, lineterminator="\n")


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def emit_json(obj, out=None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def seed_list(count: int, root_seed: int) -> list:
    if count < 1:
        raise UsageError("--seeds must be at least 1")
    return [split_seed(root_seed, i) for i in range(count)]


def parse_range(text: str) -> list:
    """'2..5', '2-5' or '2,3,7' -> list of ints."""
    for sep in ("..", "-"):
        if sep in text:
            lo, hi = text.split(sep, 1)
            return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


# ----------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    m = load_mdp(args.mdp)
    if args.gamma is not None:
        m = m.with_gamma(args.gamma)
    vstar, qstar = value_iteration(m, args.tol)
    pi = fair_optimal_policy(m, qstar, args.tie_tol)
    try:
        mu = stationary_distribution(m, pi)
    except UnichainViolation as e:
        status(f"⚠️  fair optimal policy is not unichain ({e}); mu* left empty")
        mu = np.full(m.n, np.nan)
    table = pd.DataFrame({"state": np.arange(m.n), "V": vstar})
    for a in range(m.k):
        table[f"Q{a}"] = qstar[:, a]
    table["mu"] = mu
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    if args.out:
        write_csv(table, args.out, not args.no_timestamp)
        status(f"✓ wrote {args.out}")
    return 0


# ----------------------------------------------------------------------------
# simulate


def policy_from_name(name: str, m) -> StochasticPolicy:
    if name == "uniform":
        return StochasticPolicy.uniform(m.n, m.k)
    if name in ("optimal", "fair-optimal"):
        _, qstar = value_iteration(m)
        return greedy_policy(qstar) if name == "optimal" else fair_optimal_policy(m, qstar)
    if name.startswith("fixed:"):
        row = np.array([float(p) for p in name.split(":", 1)[1].split(",")])
        if row.shape != (m.k,):
            raise UsageError(f"fixed distribution needs {m.k} entries, got {row.size}")
        return StochasticPolicy(np.tile(row, (m.n, 1)))
    raise UsageError(f"unknown policy {name!r} (uniform, optimal, fair-optimal, fixed:p0,...)")


def cmd_simulate(args) -> int:
    m = load_mdp(args.mdp)
    pi = policy_from_name(args.policy, m)
    trace = simulate(m, pi, args.T, args.seed, args.start)
    trace.save_jsonl(args.out)
    status(f"✓ {args.T} steps of {args.policy} play written to {args.out}")
    return 0


# ----------------------------------------------------------------------------
# audit


def cmd_audit(args) -> int:
    if args.alpha < 0:
        raise UsageError(f"--alpha must be nonnegative, got {args.alpha}")
    m = load_mdp(args.mdp)
    trace = load_trace(args.trace)
    _, qstar = value_iteration(m)
    report = audit(trace, qstar, args.definition, args.alpha, args.tie_tol)
    emit_json(report.to_dict(), args.out)
    if report.passed:
        status(f"✓ {args.definition} fairness holds on all {len(trace)} steps")
        return 0
    status(f"❌ {report.violation_count} {args.definition} fairness violations")
    return 2


# ----------------------------------------------------------------------------
# chain-lb


def chain_learner_factory(spec: ChainSpec, learner: str):
    if learner == "uniform":
        return functools.partial(baseline_uniform, spec.n, spec.k)
    if learner == "greedy":
        return functools.partial(baseline_greedy_e3, spec.n, spec.k, spec.gamma)
    if learner.startswith("choice-fair:"):
        alpha = float(learner.split(":", 1)[1])
        return functools.partial(choice_fair_chain_policy, spec, alpha)
    if learner.startswith("action-fair:"):
        # the chain is sized so an action-fair learner cannot favour either action
        return functools.partial(baseline_uniform, spec.n, spec.k)
    raise UsageError(f"unknown learner {learner!r} (uniform, choice-fair:ALPHA, action-fair:ALPHA, greedy)")


def learner_alpha(learner: str) -> float:
    if learner.startswith(("choice-fair:", "action-fair:")):
        return float(learner.split(":", 1)[1])
    return 0.0


def chain_lengths(n_range: Optional[str], learner: str, gamma: float) -> list:
    """--n-range when given; an action-fair learner alone sizes its chain from alpha and gamma."""
    if n_range:
        ns = parse_range(n_range)
    elif learner.startswith("action-fair:"):
        ns = [action_fair_chain_length(learner_alpha(learner), gamma)]
    else:
        raise UsageError("--n-range is required unless the learner is action-fair:ALPHA")
    if not ns or min(ns) < 2:
        raise UsageError("--n-range must only contain n >= 2")
    return ns


def cmd_chain_lb(args) -> int:
    ns = chain_lengths(args.n_range, args.learner, args.gamma)
    seeds = seed_list(args.seeds, args.root_seed)
    rows, means = [], []
    for n in ns:
        spec = ChainSpec(n, args.k, args.x, args.gamma)
        factory = chain_learner_factory(spec, args.learner)
        records = coupling_experiment(spec, factory, seeds, args.t_cap, jobs=args.jobs,
                                      progress=TQDM_AVAILABLE)
        summary = summarize_coupling(records)
        means.append(summary.mean)
        status(f"  n={n}: mean first hit {summary.mean:.2f} ± {summary.sem:.2f} "
               f"({summary.censored} censored)")
        rows.extend({"seed": r.seed, "n": n, "k": args.k, "alpha": learner_alpha(args.learner),
                     "first_hit": r.first_hit, "censored": r.censored} for r in records)
    if len(ns) > 1 and min(means) > 0:
        fit = growth_factor(ns, means)
        status(f"✓ growth factor per state {fit.factor:.3f} (r={fit.rvalue:.3f})")
    df = pd.DataFrame(rows, columns=["seed", "n", "k", "alpha", "first_hit", "censored"])
    if args.out:
        write_csv(df, args.out, not args.no_timestamp)
        status(f"✓ wrote {len(df)} rows to {args.out}")
    else:
        print(SCHEMA_HEADER)
        df.to_csv(sys.stdout, index=False, lineterminator="\n")
    return 0


# ----------------------------------------------------------------------------
# fair-e3


def fair_e3_metrics(m, config: FairE3Config, T: int, seed: int, oracle: bool) -> dict:
    _, metrics = run_fair_e3(m, config, T, seed, oracle=oracle)
    return metrics.to_dict()


def run_seeds(m, config: FairE3Config, T: int, seeds: list, oracle: bool, jobs: int) -> list:
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fair_e3_metrics, itertools.repeat(m), itertools.repeat(config),
                                 itertools.repeat(T), seeds, itertools.repeat(oracle)))
    it = tqdm(seeds, desc="fair-e3", leave=False) if TQDM_AVAILABLE and len(seeds) > 1 else seeds
    return [fair_e3_metrics(m, config, T, seed, oracle) for seed in it]


def summarize_runs(results: list, delta: float) -> dict:
    gaps = np.array([r["gap"] for r in results])
    failures = sum(r["audit"]["verdict"] != "pass" for r in results)
    return {
        "runs": len(results),
        "median_gap": float(np.median(gaps)),
        "mean_gap": float(gaps.mean()),
        "audit_pass_rate": 1.0 - failures / len(results),
        "delta_compliant": delta_compliant(failures, len(results), delta),
        "mean_steps_random": float(np.mean([r["steps_random"] for r in results])),
        "mean_steps_sample": float(np.mean([r["steps_sample"] for r in results])),
        "mean_steps_explore": float(np.mean([r["steps_explore"] for r in results])),
        "mean_steps_exploit": float(np.mean([r["steps_exploit"] for r in results])),
    }


def load_instance(mdp_path, chain: str, gamma):
    if bool(mdp_path) == bool(chain):
        raise UsageError("give exactly one of an MDP file or --chain n,k,x")
    if chain:
        parts = [float(v) for v in chain.split(",")]
        if len(parts) != 3:
            raise UsageError(f"--chain expects n,k,x, got {chain!r}")
        return make_chain(ChainSpec(int(parts[0]), int(parts[1]), parts[2], 0.9 if gamma is None else gamma))
    m = load_mdp(mdp_path)
    return m.with_gamma(gamma) if gamma is not None else m


def cmd_fair_e3(args) -> int:
    m = load_instance(args.mdp, args.chain, args.gamma)
    config = FairE3Config(
        eps=args.eps, alpha=args.alpha, delta=args.delta, gamma=m.gamma,
        tstar=None if args.tstar_sequential else args.tstar,
        mq_override=args.mq, scale=args.scale, horizon=args.horizon, beta=args.beta,
        tie_tol=args.tie_tol, escape_mc_runs=args.escape_mc_runs,
    )
    if config.tstar is None and not args.tstar_sequential:
        raise UsageError("give --tstar T or --tstar-sequential")
    seeds = seed_list(args.seeds, args.root_seed)
    status(f"🚀 Fair-E3 on {m.n} states / {m.k} actions, {len(seeds)} seeds x {args.T} steps")
    results = run_seeds(m, config, args.T, seeds, args.oracle, args.jobs)
    summary = summarize_runs(results, config.delta)
    lines = [json.dumps(r) for r in results]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        status(f"✓ per-seed metrics written to {args.out}")
    else:
        print("\n".join(lines))
    print(json.dumps({"summary": summary}))
    status(f"✓ median gap {summary['median_gap']:.4f}, audit pass rate {summary['audit_pass_rate']:.2f}")
    return 0


# ----------------------------------------------------------------------------
# sweep


def cell_key(params: dict) -> str:
    return "|".join(f"{k}={params[k]}" for k in sorted(params))


def grid_cells(grid: dict) -> list:
    if not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise UsageError("sweep grid must map each parameter to a nonempty list")
    names = list(grid)
    return [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]


def run_chain_cell(params: dict) -> dict:
    learner = params.get("learner", "uniform")
    if "alpha" in params and learner in ("choice-fair", "action-fair"):
        learner = f"{learner}:{params['alpha']}"
    gamma = float(params.get("gamma", 0.9))
    n = params.get("n")
    if n is None:
        n = chain_lengths(None, learner, gamma)[0]
    spec = ChainSpec(int(n), int(params.get("k", 2)), float(params.get("x", 1.0)), gamma)
    seeds = seed_list(int(params.get("seeds", 100)), int(params.get("root_seed", 0)))
    records = coupling_experiment(spec, chain_learner_factory(spec, learner), seeds,
                                  int(params.get("t_cap", 100000)))
    summary = summarize_coupling(records)
    return {"n": spec.n, "k": spec.k, "gamma": spec.gamma, "alpha": learner_alpha(learner), "learner": learner,
            "runs": summary.runs, "mean_first_hit": summary.mean, "sem": summary.sem,
            "censored": summary.censored}


def run_fair_e3_cell(params: dict) -> dict:
    p = dict(params)
    if "chain_n" in p:
        m = make_chain(ChainSpec(int(p.pop("chain_n")), int(p.pop("chain_k", 2)),
                                 float(p.pop("chain_x", 1.0)), float(p.get("gamma", 0.9))))
    else:
        m = load_mdp(p.pop("instance"))
    T = int(p.pop("T"))
    seeds = seed_list(int(p.pop("seeds", 5)), int(p.pop("root_seed", 0)))
    oracle = bool(p.pop("oracle", False))
    p["gamma"] = m.gamma
    config = FairE3Config(**{k: v for k, v in p.items() if k in FairE3Config.__dataclass_fields__})
    results = [fair_e3_metrics(m, config, T, seed, oracle) for seed in seeds]
    return summarize_runs(results, config.delta)


CELL_RUNNERS = {"chain-lb": run_chain_cell, "fair-e3": run_fair_e3_cell}


def sweep_cell(experiment: str, base: dict, point: dict) -> dict:
    row = {"key": cell_key(point)}
    row.update(point)
    row.update(CELL_RUNNERS[experiment]({**base, **point}))
    return row


def cmd_sweep(args) -> int:
    try:
        config = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise MdpError(f"{args.config}:{e.lineno}: {e.msg}")
    experiment = config.get("experiment")
    if experiment not in CELL_RUNNERS:
        raise UsageError(f"sweep experiment must be one of {sorted(CELL_RUNNERS)}, got {experiment!r}")
    base = config.get("base", {})
    cells = grid_cells(config.get("grid", {}))
    out = args.out or config.get("out")
    if not out:
        raise UsageError("sweep needs an output path (--out or \"out\" in the config)")

    done = {}
    if Path(out).exists():
        previous = read_csv(out)
        done = {row["key"]: row for row in previous.to_dict("records")}
    todo = [c for c in cells if cell_key(c) not in done]
    status(f"🚀 sweep {experiment}: {len(cells)} cells, {len(cells) - len(todo)} already done")

    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            fresh = list(pool.map(sweep_cell, itertools.repeat(experiment), itertools.repeat(base), todo))
    else:
        it = tqdm(todo, desc="sweep", leave=False) if TQDM_AVAILABLE and todo else todo
        fresh = [sweep_cell(experiment, base, c) for c in it]
    for row in fresh:
        done[row["key"]] = row

    df = pd.DataFrame([done[cell_key(c)] for c in cells])
    write_csv(df, out, not args.no_timestamp)
    status(f"✓ {len(fresh)} cells computed, {len(df)} rows in {out}")
    return 0


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = HarnessParser(prog="fair_mdp", description=__doc__.strip().splitlines()[0], epilog=SEED_RULE)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=HarnessParser)

    def common(p, seeds=False):
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line in CSV output")
        if seeds:
            p.add_argument("--seeds", type=int, default=20, help="number of seeded runs")
            p.add_argument("--root-seed", type=int, default=0)
            p.add_argument("--jobs", type=int, default=DEFAULT_JOBS, help="worker processes (FAIR_MDP_JOBS)")

    p = sub.add_parser("plan", help="optimal values, Q table and fair-optimal stationary distribution")
    p.add_argument("mdp")
    p.add_argument("--gamma", type=float)
    p.add_argument("--tol", type=float, default=PLANNER_TOL)
    p.add_argument("--tie-tol", type=float, default=TIE_TOL)
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="write a JSONL trace of a named policy")
    p.add_argument("mdp")
    p.add_argument("--policy", default="uniform", help="uniform, optimal, fair-optimal or fixed:p0,p1,...")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", help="audit a trace; exit 2 on violations")
    p.add_argument("trace")
    p.add_argument("mdp")
    p.add_argument("--definition", choices=DEFINITIONS, default="exact")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--tie-tol", type=float, default=TIE_TOL)
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("chain-lb", help="first-hit times on the chain lower-bound family")
    p.add_argument("--n-range", help="e.g. 2..10; optional for action-fair:ALPHA, which sizes its own chain")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--learner", default="uniform", help="uniform, choice-fair:ALPHA, action-fair:ALPHA or greedy")
    p.add_argument("--t-cap", type=int, default=1_000_000)
    common(p, seeds=True)
    p.set_defaults(func=cmd_chain_lb)

    p = sub.add_parser("fair-e3", help="run Fair-E3 over seeds; per-seed metrics plus a summary")
    p.add_argument("mdp", nargs="?")
    p.add_argument("--chain", help="n,k,x chain instance instead of an MDP file")
    p.add_argument("--gamma", type=float)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--delta", type=float, default=0.1)
    tstar = p.add_mutually_exclusive_group()
    tstar.add_argument("--tstar", type=int)
    tstar.add_argument("--tstar-sequential", action="store_true")
    p.add_argument("--mq", type=int, help="known-state threshold override")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--horizon", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--tie-tol", type=float, default=TIE_TOL)
    p.add_argument("--escape-mc-runs", type=int)
    p.add_argument("--oracle", action="store_true", help="plan with the true model")
    p.add_argument("--T", type=int, required=True)
    common(p, seeds=True)
    p.set_defaults(func=cmd_fair_e3)

    p = sub.add_parser("sweep", help="run a parameter grid from a JSON config, resumable by cell key")
    p.add_argument("config")
    common(p)
    p.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        status(f"❌ usage: {e}")
        return 1
    except (MdpError, ValueError, OSError, KeyError) as e:
        status(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
