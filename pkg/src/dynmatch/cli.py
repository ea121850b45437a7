"""Command-line front end: single runs, replication sweeps, analytic
reports, and the self-verification suite.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 output I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analytics, oracles
from .core import (
    ConfigError,
    Constant,
    DepartureSpec,
    DomainError,
    Exponential,
    FormatError,
    MarketConfig,
    NeverPerish,
    PolicyKind,
    RangeError,
    Uniform,
    departure_cdf,
    departure_to_dict,
    mix_seed,
    parse_departure_flag,
    support_min,
)
from .engine import (
    RUN_CSV_COLUMNS,
    RunStats,
    instrument_patient_k1,
    pool_integral,
    run,
    run_coupled,
)

CSV_SCHEMA_HEADER = "#schema=1"

SUMMARY_CSV_COLUMNS = (
    "d",
    "mean_loss",
    "std_loss",
    "min_loss",
    "q1_loss",
    "median_loss",
    "q3_loss",
    "max_loss",
    "mean_avg_wait",
    "n",
)


@dataclass(frozen=True)
class SweepSpec:
    """Replication grid over density values with derived per-cell seeds.

    The cell (d_values[i], rep) runs with seed mix_seed(master_seed, i, rep),
    so a sweep is reproducible cell by cell and cells are independent.
    """

    m: float
    T: float
    policy: PolicyKind
    departure: DepartureSpec
    d_values: tuple[float, ...]
    replications: int
    master_seed: int

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if not self.d_values:
            raise ConfigError("d_values must be nonempty")
        if any(d > self.m for d in self.d_values):
            raise ConfigError("every d must satisfy d <= m")

    def cell_config(self, d_index: int, rep: int) -> MarketConfig:
        return MarketConfig(
            m=self.m,
            d=self.d_values[d_index],
            T=self.T,
            policy=self.policy,
            departure=self.departure,
            seed=mix_seed(self.master_seed, d_index, rep),
        )


def run_sweep(spec: SweepSpec, jobs: int = 1) -> list[RunStats]:
    """Run all (d, replication) cells; rows come back in cell order
    regardless of execution order or parallelism."""
    configs = [
        spec.cell_config(i, rep)
        for i in range(len(spec.d_values))
        for rep in range(spec.replications)
    ]
    if jobs <= 1:
        return [run(cfg) for cfg in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, configs, chunksize=4))


def summarize(rows: list[RunStats]) -> list[dict]:
    """Per-d summary rows; quartiles use linear interpolation between
    order statistics."""
    by_d: dict[float, list[RunStats]] = {}
    for row in rows:
        by_d.setdefault(row.d, []).append(row)
    out = []
    for d in sorted(by_d):
        losses = np.array([r.loss for r in by_d[d]])
        q1, med, q3 = np.quantile(losses, [0.25, 0.5, 0.75])
        out.append(
            {
                "d": d,
                "mean_loss": float(losses.mean()),
                "std_loss": float(losses.std(ddof=1)) if losses.size > 1 else 0.0,
                "min_loss": float(losses.min()),
                "q1_loss": float(q1),
                "median_loss": float(med),
                "q3_loss": float(q3),
                "max_loss": float(losses.max()),
                "mean_avg_wait": float(np.mean([r.avg_wait for r in by_d[d]])),
                "n": len(by_d[d]),
            }
        )
    return out


def write_raw_csv(rows: list[RunStats], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(RUN_CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_row())


def write_summary_csv(summary: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_CSV_COLUMNS)
        for row in summary:
            writer.writerow([row[col] for col in SUMMARY_CSV_COLUMNS])


def write_trace_csv(trajectory: list[tuple[float, int]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(("time", "size"))
        writer.writerows(trajectory)


# --------------------------------------------------------------------------
# Subcommands


def _config_from_args(args: argparse.Namespace) -> MarketConfig:
    if args.config:
        with open(args.config) as fh:
            return MarketConfig.from_dict(json.load(fh))
    if args.m is None or args.d is None or args.T is None:
        raise ConfigError("either --config or all of --m/--d/--T are required")
    return MarketConfig(
        m=args.m,
        d=args.d,
        T=args.T,
        policy=PolicyKind(args.policy),
        departure=parse_departure_flag(args.departure),
        seed=args.seed,
        pool_trace=bool(args.trace_out),
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    stats = run(config, burn_in=args.burn_in)
    if args.trace_out:
        write_trace_csv(stats.pool_trajectory, Path(args.trace_out))
    json.dump(stats.to_json_dict(), sys.stdout, indent=2)
    print()
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = SweepSpec(
        m=args.m,
        T=args.T,
        policy=PolicyKind(args.policy),
        departure=parse_departure_flag(args.departure),
        d_values=tuple(args.d_list),
        replications=args.reps,
        master_seed=args.seed,
    )
    rows = run_sweep(spec, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raw_csv(rows, out / "raw.csv")
    write_summary_csv(summarize(rows), out / "summary.csv")
    print(f"wrote {out / 'raw.csv'} and {out / 'summary.csv'}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    departure = parse_departure_flag(args.departure)
    params = analytics.ChainParams(m=args.m, d=args.d)
    dist = analytics.stationary(params, tail_tol=args.tail_tol)
    consts = analytics.bound_constants(args.m, args.d)
    decay = analytics.stationary_tail_decay(params) if args.m >= 100 else None
    heur = analytics.heuristic_predictions(args.m, args.d) if args.d >= 1 else None

    eps = support_min(departure)
    gdy_upper = None
    if args.d >= 2 and math.isfinite(eps) and eps > 0:
        gdy_upper = analytics.gdy_loss_upper(args.d, eps)
    eps_lb = max(eps, 1.0 / args.d) if math.isfinite(eps) else 1.0 / args.d
    delta = departure_cdf(departure, eps_lb)
    gdy_lower = analytics.gdy_loss_lower(args.d, eps_lb, delta)
    pat_upper = analytics.pat_loss_upper(args.d) if departure == Constant(1.0) else None
    c_min = 1.0 if departure == Constant(1.0) else eps
    mass = 1.0 - departure_cdf(departure, c_min) + _point_mass(departure, c_min)
    wait_lower, wait_upper = analytics.waiting_bounds(args.m, args.T, args.d, c_min, mass)

    report = {
        "m": args.m,
        "d": args.d,
        "T": args.T,
        "departure": departure_to_dict(departure),
        "stationary": {
            "mean": analytics.stationary_mean(dist),
            "median": dist.quantile(0.5),
            "q99": dist.quantile(0.99),
            "truncation_K": dist.truncation_K,
            "tail_bound": dist.tail_bound,
            "mass_above_c1_threshold": dist.mass_above(
                consts.c1 * math.log(2) * args.m / args.d
            ),
        },
        "constants": {"c1": consts.c1, "c2": consts.c2, "c3": consts.c3},
        "tail_decay_check": None
        if decay is None
        else {
            "pass": decay.passed,
            "threshold": decay.threshold,
            "max_ratio_beyond": decay.max_ratio_beyond,
            "decay_bound": decay.decay_bound,
            "mass_beyond": decay.mass_beyond,
            "mass_cap": decay.mass_cap,
        },
        "loss_bounds": {
            "gdy_upper": gdy_upper,
            "gdy_lower": gdy_lower,
            "gdy_lower_eps": eps_lb,
            "gdy_lower_delta": delta,
            "pat_upper": pat_upper,
        },
        "waiting_bounds": {
            "total_lower": wait_lower,
            "total_upper": wait_upper,
            "per_agent_lower": None if wait_lower is None else wait_lower / (args.m * args.T),
            "per_agent_upper": wait_upper / (args.m * args.T),
        },
        "heuristic": None
        if heur is None
        else {
            "pool_gdy": heur.pool_gdy,
            "pool_pat": heur.pool_pat,
            "loss_both": heur.loss_both,
        },
    }
    json.dump(report, sys.stdout, indent=2)
    print()
    return 0


def _point_mass(spec: DepartureSpec, x: float) -> float:
    lower = departure_cdf(spec, max(x - 1e-12, 0.0)) if x > 0 else 0.0
    return departure_cdf(spec, x) - lower


# --------------------------------------------------------------------------
# Verification matrix


def _check_coupling(runs: int, seed: int) -> dict:
    specs = [Constant(1.0), Exponential(1.0), Uniform(0.5, 1.5)]
    worst = 0
    total = 0
    for i, departure in enumerate(specs):
        for rep in range(runs):
            config = MarketConfig(
                m=200.0,
                d=4.0,
                T=20.0,
                policy=PolicyKind.GREEDY,
                departure=departure,
                seed=mix_seed(seed, i, rep),
            )
            _, _, gap = run_coupled(config)
            worst = max(worst, gap)
            total += 1
    return {"name": "coupling", "runs": total, "max_gap": worst, "pass": worst <= 1}


def _check_ruin(trials: int, seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    failures = []
    for spec in (
        oracles.WalkSpec(p_up=0.4, M=1, N=3, start=1),
        oracles.WalkSpec(p_up=0.45, M=2, N=8, start=2),
        oracles.WalkSpec(p_up=0.5, M=1, N=5, start=2),
    ):
        exact = oracles.ruin_hit_probability(spec).exact
        emp = oracles.ruin_hit_monte_carlo(spec, trials, rng)
        se = math.sqrt(max(exact * (1 - exact), 1e-12) / trials)
        if abs(emp - exact) > 3 * se:
            failures.append({"spec": vars(spec), "exact": exact, "empirical": emp})
    return {"name": "ruin", "trials": trials, "failures": failures, "pass": not failures}


def _check_urn(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    failures = []
    for red, blue, draws in ((2, 2, 2), (40, 60, 50), (30, 80, 40), (5, 5, 10)):
        spec = oracles.UrnSpec(red, blue, draws)
        total = math.fsum(oracles.urn_pmf(spec, k) for k in range(draws + 1))
        if abs(total - 1.0) > 1e-12:
            failures.append({"spec": vars(spec), "pmf_total": total})
    m = 280.0
    for k1 in (30, 60, 90):
        for l_extra in (0, 10, 20):
            n = 3 * k1  # red fraction 1/4 <= 2/5
            spec = oracles.UrnSpec(k1, n, int(m / 8) + l_extra)
            check = oracles.urn_half_exceedance_bound(spec, m)
            if not check.satisfied:
                failures.append({"spec": vars(spec), "exact": check.exact})
    empirical = oracles.urn_sample_many(oracles.UrnSpec(40, 60, 50), 20_000, rng)
    exact_mean = 50 * 40 / 100
    if abs(float(empirical.mean()) - exact_mean) > 0.2:
        failures.append({"urn_sample_mean": float(empirical.mean())})
    return {"name": "urn", "failures": failures, "pass": not failures}


def _check_dominance(runs: int, seed: int) -> dict:
    records = []
    for rep in range(runs):
        config = MarketConfig(
            m=300.0,
            d=5.0,
            T=3.0,
            policy=PolicyKind.PATIENT,
            departure=Constant(1.0),
            seed=mix_seed(seed, rep),
        )
        records.append(instrument_patient_k1(config, t=2.0))
    report = oracles.dominance_check(records)
    return {
        "name": "dominance",
        "runs": runs,
        "violations": list(report.violations),
        "pass": report.passed,
    }


def _check_identities(seed: int) -> dict:
    failures = []
    cases = [
        (policy, departure)
        for policy in PolicyKind
        for departure in (Constant(1.0), Exponential(1.0), Uniform(0.5, 1.5), NeverPerish())
    ]
    for i, (policy, departure) in enumerate(cases):
        config = MarketConfig(
            m=200.0,
            d=3.0,
            T=10.0,
            policy=policy,
            departure=departure,
            seed=mix_seed(seed, i),
            pool_trace=True,
        )
        stats = run(config, keep_agents=True)
        if stats.arrivals != stats.matched + stats.perished + stats.pool_at_T:
            failures.append({"case": i, "reason": "conservation"})
        integral = pool_integral(stats.pool_trajectory, config.T)
        per_agent = math.fsum(
            min(a.outcome_time, config.T) - a.arrival_time for a in stats.agents
        )
        if abs(integral - per_agent) > 1e-9:
            failures.append({"case": i, "reason": "waiting-identity"})
    return {"name": "identities", "cases": len(cases), "failures": failures, "pass": not failures}


def _check_timechange(runs: int, seed: int) -> dict:
    # rescaling every clock by c is an exact bijection of sample paths:
    # (Exp(1), d, m, T) and (Exp(c), c*d, c*m, T/c) share the loss law
    c, d0, m0, T0 = 2.0, 2.0, 50.0, 20.0
    losses = {"scaled": [], "base": []}
    for rep in range(runs):
        base = MarketConfig(
            m=m0,
            d=d0,
            T=T0,
            policy=PolicyKind.GREEDY,
            departure=Exponential(1.0),
            seed=mix_seed(seed, 0, rep),
        )
        scaled = MarketConfig(
            m=c * m0,
            d=c * d0,
            T=T0 / c,
            policy=PolicyKind.GREEDY,
            departure=Exponential(c),
            seed=mix_seed(seed, 1, rep),
        )
        losses["base"].append(run(base).loss)
        losses["scaled"].append(run(scaled).loss)
    a = np.array(losses["scaled"])
    b = np.array(losses["base"])
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    gap = abs(float(a.mean() - b.mean()))
    return {
        "name": "timechange",
        "runs": runs,
        "mean_scaled": float(a.mean()),
        "mean_base": float(b.mean()),
        "gap": gap,
        "pass": gap <= 3 * se,
    }


VERIFY_CHECKS = ("coupling", "ruin", "urn", "dominance", "identities", "timechange")


def cmd_verify(args: argparse.Namespace) -> int:
    selected = VERIFY_CHECKS if "all" in args.check else tuple(args.check)
    results = []
    for name in selected:
        if name == "coupling":
            results.append(_check_coupling(max(args.runs // 3, 1), args.seed))
        elif name == "ruin":
            results.append(_check_ruin(max(args.runs * 1000, 10_000), args.seed))
        elif name == "urn":
            results.append(_check_urn(args.seed))
        elif name == "dominance":
            results.append(_check_dominance(args.runs, args.seed))
        elif name == "identities":
            results.append(_check_identities(args.seed))
        elif name == "timechange":
            results.append(_check_timechange(max(args.runs, 50), args.seed))
    ok = all(r["pass"] for r in results)
    json.dump({"pass": ok, "checks": results}, sys.stdout, indent=2)
    print()
    return 0 if ok else 1


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmatch",
        description="Simulate and analyze continuous-time dynamic matching markets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_market_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--m", type=float, help="arrival rate (agents per time unit)")
        p.add_argument("--T", type=float, help="horizon")
        p.add_argument(
            "--policy",
            choices=[k.value for k in PolicyKind],
            default="greedy",
        )
        p.add_argument(
            "--departure",
            default="const:1",
            help="const:<c> | exp:<rate> | unif:<a>:<b> | never | mix:<w>*<spec>,...",
        )
        p.add_argument("--seed", type=int, default=1)

    p_sim = sub.add_parser("simulate", help="one run, JSON stats on stdout")
    add_market_flags(p_sim)
    p_sim.add_argument("--d", type=float, help="density parameter")
    p_sim.add_argument("--config", help="JSON market config (overrides flags)")
    p_sim.add_argument("--trace-out", help="write the pool trajectory CSV here")
    p_sim.add_argument(
        "--burn-in",
        type=float,
        default=0.0,
        help="exploratory warm-up; stats cover arrivals in (burn_in, burn_in + T]",
    )
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="replication sweep over d, CSV output")
    add_market_flags(p_sweep)
    p_sweep.add_argument("--d-list", type=float, nargs="+", required=True)
    p_sweep.add_argument("--reps", type=int, default=10)
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_an = sub.add_parser("analyze", help="stationary chain, bounds, predictions")
    p_an.add_argument("--m", type=float, required=True)
    p_an.add_argument("--d", type=float, required=True)
    p_an.add_argument("--T", type=float, default=100.0)
    p_an.add_argument("--departure", default="const:1")
    p_an.add_argument("--tail-tol", type=float, default=1e-12)
    p_an.set_defaults(func=cmd_analyze)

    p_ver = sub.add_parser("verify", help="run the oracle verification matrix")
    p_ver.add_argument(
        "--check",
        action="append",
        choices=VERIFY_CHECKS + ("all",),
        default=None,
        help="repeatable; default all",
    )
    p_ver.add_argument("--runs", type=int, default=100)
    p_ver.add_argument("--seed", type=int, default=20240801)
    p_ver.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify" and args.check is None:
        args.check = ["all"]
    try:
        return args.func(args)
    except (ConfigError, DomainError, RangeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
