"""Command-line front end.

Subcommands cover single runs, the sweep/burst/cost experiment presets,
server-count sensitivity, the routing microbenchmark, capacity analysis
and trace generation. Exit codes: 0 success, 2 config error, 3 invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import yaml

from . import bench, capacity, workload
from .bench import PRESETS, ExperimentSpec, SimJob
from .perf_model import (AnalyticModel, AnalyticParams, PerfModel,
                         ProfileError, TableModel, default_model, load_profile)
from .sim import InvariantError
from .workload import SloTier, TraceError


class ConfigError(ValueError):
    pass


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def model_from_config(cfg: dict) -> PerfModel:
    mc = cfg.get("model", {})
    if not isinstance(mc, dict):
        raise ConfigError("model section must be a mapping")
    if "profile" in mc:
        table = load_profile(mc["profile"])
        return TableModel(table,
                          pf1_us_per_token=mc.get("pf1_us_per_token", 0.033),
                          kv_capacity=mc.get("kv_capacity"))
    if not mc:
        return default_model()
    try:
        fields = {k: mc[k] for k in (
            "g0_us", "g1_us_per_token", "b_knee", "d1_us_per_kv_token",
            "pf1_us_per_token", "kv_capacity") if k in mc}
        return AnalyticModel(AnalyticParams(**fields))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc


def spec_from_args(args, cfg: dict) -> ExperimentSpec:
    exp = cfg.get("experiment", {})
    kwargs = dict(
        preset=args.preset or exp.get("preset", "uniform_512_512"),
        architecture=args.arch or exp.get("architecture", "pd"),
        n_requests=args.n or exp.get(
            "n_requests", 300_000 if args.full else 10_000),
        n_servers=args.instances or exp.get("n_servers", 20),
        out_dir=args.out,
        full=args.full,
    )
    if args.policy:
        kwargs["policies"] = (args.policy,)
    elif "policies" in exp:
        kwargs["policies"] = tuple(exp["policies"])
    if args.seed is not None:
        kwargs["seeds"] = (args.seed,)
    elif "seeds" in exp:
        kwargs["seeds"] = tuple(exp["seeds"])
    if "rate_fractions" in exp:
        kwargs["rate_fractions"] = tuple(exp["rate_fractions"])
    try:
        return ExperimentSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args, cfg: dict) -> int:
    model = model_from_config(cfg)
    spec = spec_from_args(args, cfg)
    preset = PRESETS[spec.preset]
    rate = args.rate
    if rate is None:
        rate = 0.8 * bench.capacity_rate(model, preset, spec.architecture,
                                         spec.n_servers)
    policy = spec.policies[0]
    seed = spec.seeds[0]
    from .scheduler import SchedulerConfig
    from .sim import ClusterSim, SimConfig
    reqs = bench.build_requests(preset, spec.n_requests, rate, seed, model)
    pairs = [(r.p, r.d_true) for r in reqs]
    sched = SchedulerConfig(
        policy=policy, architecture=spec.architecture,
        avg_decode_len=workload.mean_decode_len(pairs),
        co_tier_budgets=(bench.co_tier_budgets(model, preset)
                         if spec.architecture == "co" and policy == "polyserve"
                         else None))
    sim = ClusterSim(reqs, model, SimConfig(
        sched=sched, n_servers=spec.n_servers, seed=seed,
        record_tokens=args.tokens))
    metrics = sim.run()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        sim.dump_metrics(metrics, f)
    if args.tokens:
        with open(os.path.join(args.out, "tokens.csv"), "w") as f:
            sim.dump_tokens(f)
    print(f"attainment={metrics.attainment:.4f} "
          f"goodput={metrics.goodput_rps:.2f}/s "
          f"cost/req={metrics.cost_per_req_us / 1e6:.3f} inst-s")
    return 0


def cmd_sweep(args, cfg: dict, burst: bool = False) -> int:
    model = model_from_config(cfg)
    spec = spec_from_args(args, cfg)
    if burst:
        spec = ExperimentSpec(**{**spec.__dict__, "burst": True})
    summary = bench.run_sweep_experiment(spec, model)
    for pol, gp in summary["goodput_at_0.9"].items():
        print(f"{pol}: goodput_at(0.9) = {gp:.2f} req/s")
    if "ratio_vs_best_baseline" in summary:
        print(f"ratio vs best baseline: {summary['ratio_vs_best_baseline']:.3f}")
    return 0


def cmd_cost(args, cfg: dict) -> int:
    # The cost-vs-rate view is the sweep's cost column; run the same matrix.
    return cmd_sweep(args, cfg)


def cmd_servers(args, cfg: dict) -> int:
    model = model_from_config(cfg)
    spec = spec_from_args(args, cfg)
    counts = (list(range(8, 65, 8)) if args.full else [8, 16, 24, 32])
    rows = bench.run_server_scaling(spec, counts, model=model)
    for r in rows:
        print(f"servers={r['servers']:3d} attainment={r['attainment']:.4f} "
              f"goodput={r['goodput']:.2f}/s")
    return 0


def cmd_sched_bench(args, cfg: dict) -> int:
    model = model_from_config(cfg)
    res = bench.sched_bench(n_servers=args.instances or 20,
                            seed=args.seed or 0, model=model)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sched_bench.json"), "w") as f:
        json.dump(res, f, indent=2)
        f.write("\n")
    print(f"{res['decisions_per_s']:.0f} decisions/s "
          f"(p50 {res['latency_p50_us']:.1f}us, p99 {res['latency_p99_us']:.1f}us)")
    return 0


def cmd_analyze(args, cfg: dict) -> int:
    model = model_from_config(cfg)
    path = bench.run_analyze(args.out, model)
    print(f"wrote {path}")
    return 0


def cmd_gen_trace(args, cfg: dict) -> int:
    spec = spec_from_args(args, cfg)
    preset = PRESETS[spec.preset]
    pairs = workload.synthesize_uniform(spec.n_requests, preset.max_in,
                                        preset.max_out, spec.seeds[0])
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, f"{spec.preset}.csv")
    with open(trace_path, "w") as f:
        f.write("input_len,output_len\n")
        for p, d in pairs:
            f.write(f"{p},{d}\n")
    if args.rate:
        model = model_from_config(cfg)
        reqs = workload.assign_slos(pairs, workload.default_distribution(),
                                    model, spec.seeds[0] + 1)
        reqs = workload.generate_arrivals(reqs, args.rate, spec.seeds[0] + 2)
        wl_path = os.path.join(args.out, f"{spec.preset}.jsonl")
        with open(wl_path, "w") as f:
            workload.dump_workload(reqs, f)
        print(f"wrote {trace_path} and {wl_path}")
    else:
        print(f"wrote {trace_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="polysim",
        description="Multi-SLO serving scheduler simulator and benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": "run one simulation and write metrics JSON",
        "sweep": "goodput sweep over a rate grid, all policies",
        "burst": "sweep with the tier mix inverted mid-run",
        "cost": "cost-per-request vs rate (sweep matrix)",
        "servers": "goodput vs instance count",
        "sched-bench": "routing-decision throughput microbenchmark",
        "analyze": "capacity/cost curves from the closed-form model",
        "gen-trace": "emit a synthetic length trace (and optional workload)",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--policy", default=None,
                       choices=["polyserve", "random", "minimal", "chunk_static"])
        p.add_argument("--rate", type=float, default=None,
                       help="request rate in req/s")
        p.add_argument("--instances", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--full", action="store_true",
                       help="full-scale run (slow)")
        p.add_argument("--preset", default=None, choices=sorted(PRESETS))
        p.add_argument("--arch", default=None, choices=["pd", "co"])
        p.add_argument("--n", type=int, default=None, help="request count")
        if name == "simulate":
            p.add_argument("--tokens", action="store_true",
                           help="dump per-token emission CSV")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "sweep": cmd_sweep,
        "burst": lambda a, c: cmd_sweep(a, c, burst=True),
        "cost": cmd_cost,
        "servers": cmd_servers,
        "sched-bench": cmd_sched_bench,
        "analyze": cmd_analyze,
        "gen-trace": cmd_gen_trace,
    }
    try:
        cfg = load_config(args.config)
        return handlers[args.command](args, cfg)
    except (ConfigError, ProfileError, TraceError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
