"""Experiment presets and runners.

Ties the workload generator, scheduler and simulator together into the
benchmark matrix: goodput sweeps over a rate grid, the mid-run tier-mix
flip, capacity/cost curves, server-count sensitivity, and the routing
microbenchmark. Rates are expressed as fractions of a computed capacity
bound so results are comparable across presets.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import mean
from typing import Optional, Sequence

import numpy as np

from . import capacity, sim, workload
from .capacity import UNBOUNDED_US, WorkloadPoint
from .perf_model import PerfModel, default_model
from .scheduler import Cluster, Outcome, SchedulerConfig
from .sim import RunMetrics, SimConfig, goodput_at
from .workload import (TierDistribution, default_distribution,
                       inverted_distribution, mean_decode_len)


@dataclass(frozen=True)
class Preset:
    name: str
    max_in: int
    max_out: int


PRESETS = {
    "uniform_512_512": Preset("uniform_512_512", 1024, 1024),
    "uniform_4096_1024": Preset("uniform_4096_1024", 8192, 2048),
}

POLICIES = ("polyserve", "random", "minimal", "chunk_static")
DEFAULT_RATE_FRACTIONS = (0.2, 0.5, 0.8, 1.0, 1.2)
SWEEP_HEADER = "rate,attainment,goodput,cost_per_req\n"


@dataclass
class ExperimentSpec:
    preset: str = "uniform_512_512"
    architecture: str = "pd"
    policies: tuple[str, ...] = POLICIES
    rate_fractions: tuple[float, ...] = DEFAULT_RATE_FRACTIONS
    n_requests: int = 10_000
    n_servers: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "out"
    full: bool = False
    burst: bool = False

    def __post_init__(self) -> None:
        if not self.policies:
            raise ValueError("need at least one policy")
        rf = self.rate_fractions
        if any(r <= 0 for r in rf) or list(rf) != sorted(rf):
            raise ValueError("rate grid must be positive and sorted")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")


def preset_means(preset: Preset) -> tuple[int, int]:
    return (preset.max_in + 1) // 2, (preset.max_out + 1) // 2


def capacity_rate(model: PerfModel, preset: Preset, architecture: str,
                  n_servers: int,
                  dist: Optional[TierDistribution] = None) -> float:
    """Cluster capacity bound (requests/s): servers / mean per-request cost.

    Evaluated at the trace-mean lengths across the tier mix; this is the
    normalizer for the sweep's rate axis.
    """
    dist = dist or default_distribution()
    p_mean, d_mean = preset_means(preset)
    mean_ttft = round(mean(v for v, _ in dist.ttft_choices))
    total = 0.0
    for tier, prob in dist.tiers:
        if prob == 0:
            continue
        w = WorkloadPoint(p_mean, d_mean, mean_ttft, tier.tpot_us)
        try:
            cost = (capacity.cost_pd(model, w) if architecture == "pd"
                    else capacity.cost_co(model, w))
        except capacity.InfeasibleError:
            w = WorkloadPoint(p_mean, d_mean, UNBOUNDED_US, tier.tpot_us)
            cost = (capacity.cost_pd(model, w) if architecture == "pd"
                    else capacity.cost_co(model, w))
        total += prob * cost
    return n_servers * 1e6 / total


def co_tier_budgets(model: PerfModel, preset: Preset,
                    dist: Optional[TierDistribution] = None) -> dict[int, int]:
    """Per-tier token budgets: largest batch meeting the tier TPOT at the
    trace-mean lengths."""
    dist = dist or default_distribution()
    p_mean, d_mean = preset_means(preset)
    budgets = {}
    for tier, _ in dist.tiers:
        w = WorkloadPoint(p_mean, d_mean, UNBOUNDED_US, tier.tpot_us)
        lim = capacity.max_token_batch_co(model, w)
        budgets[tier.id] = max(1, lim.batch)
    return budgets


def build_requests(preset: Preset, n: int, rate_rps: float, seed: int,
                   model: PerfModel, burst: bool = False) -> list:
    """The deterministic request stream for one (preset, rate, seed) cell."""
    pairs = workload.synthesize_uniform(n, preset.max_in, preset.max_out, seed)
    if burst:
        reqs = workload.burst_flip(pairs, n // 2, default_distribution(),
                                   inverted_distribution(), model,
                                   seeds=(seed + 1, seed + 11))
    else:
        reqs = workload.assign_slos(pairs, default_distribution(), model,
                                    seed + 1)
    return workload.generate_arrivals(reqs, rate_rps, seed + 2)


@dataclass(frozen=True)
class SimJob:
    preset: str
    architecture: str
    policy: str
    rate_rps: float
    n_requests: int
    n_servers: int
    seed: int
    burst: bool = False
    audit: bool = False


def run_job(job: SimJob, model: Optional[PerfModel] = None) -> RunMetrics:
    model = model or default_model()
    preset = PRESETS[job.preset]
    reqs = build_requests(preset, job.n_requests, job.rate_rps, job.seed,
                          model, burst=job.burst)
    pairs = [(r.p, r.d_true) for r in reqs]
    sched = SchedulerConfig(
        policy=job.policy, architecture=job.architecture,
        avg_decode_len=mean_decode_len(pairs),
        co_tier_budgets=(co_tier_budgets(model, preset)
                         if job.architecture == "co" and job.policy == "polyserve"
                         else None),
    )
    cfg = SimConfig(sched=sched, n_servers=job.n_servers, seed=job.seed,
                    audit=job.audit)
    return sim.run_sim(reqs, model, cfg)


def _worker(job: SimJob) -> tuple[SimJob, RunMetrics]:
    return job, run_job(job)


def run_jobs(jobs: Sequence[SimJob]) -> dict[SimJob, RunMetrics]:
    """Run the job matrix, in parallel when POLYSIM_THREADS allows."""
    threads = int(os.environ.get("POLYSIM_THREADS", "0")) or (os.cpu_count() or 1)
    results: dict[SimJob, RunMetrics] = {}
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for job, metrics in pool.map(_worker, jobs):
                results[job] = metrics
    else:
        for job in jobs:
            results[job] = run_job(job)
    return results


def sweep_rows_for_policy(spec: ExperimentSpec, policy: str,
                          results: dict[SimJob, RunMetrics],
                          rates: Sequence[float]) -> list[tuple[float, float, float, float]]:
    """Seed-averaged (rate, attainment, goodput, cost_per_req) rows."""
    rows = []
    for rate in rates:
        ms = [m for j, m in results.items()
              if j.policy == policy and j.rate_rps == rate]
        att = mean(m.attainment for m in ms)
        gp = mean(m.goodput_rps for m in ms)
        costs = [m.cost_per_req_us for m in ms if m.attained]
        cost = mean(costs) if costs else float("inf")
        rows.append((rate, att, gp, cost))
    return rows


def write_sweep_csv(path: str, rows: Sequence[tuple[float, float, float, float]]) -> None:
    with open(path, "w") as f:
        f.write(SWEEP_HEADER)
        for rate, att, gp, cost in rows:
            cost_s = f"{cost:.1f}" if cost != float("inf") else "inf"
            f.write(f"{rate:.4f},{att:.6f},{gp:.4f},{cost_s}\n")


def run_sweep_experiment(spec: ExperimentSpec,
                         model: Optional[PerfModel] = None) -> dict:
    """The (policy x rate x seed) matrix for one preset and architecture.

    Writes one sweep CSV per policy plus a summary JSON with goodput_at(0.9)
    per policy and the tiered policy's ratio over the best baseline.
    """
    model = model or default_model()
    preset = PRESETS[spec.preset]
    base = capacity_rate(model, preset, spec.architecture, spec.n_servers)
    rates = [round(f * base, 4) for f in spec.rate_fractions]
    jobs = [SimJob(spec.preset, spec.architecture, pol, rate,
                   spec.n_requests, spec.n_servers, seed, burst=spec.burst)
            for pol in spec.policies for rate in rates for seed in spec.seeds]
    results = run_jobs(jobs)
    os.makedirs(spec.out_dir, exist_ok=True)
    tag = "burst" if spec.burst else "sweep"
    summary: dict = {
        "preset": spec.preset, "architecture": spec.architecture,
        "experiment": tag, "capacity_rps": base,
        "rates_rps": rates, "goodput_at_0.9": {}, "per_tier_attainment": {},
    }
    per_policy_rows = {}
    for pol in spec.policies:
        rows = sweep_rows_for_policy(spec, pol, results, rates)
        per_policy_rows[pol] = rows
        path = os.path.join(
            spec.out_dir, f"{tag}_{spec.preset}_{spec.architecture}_{pol}.csv")
        write_sweep_csv(path, rows)
        summary["goodput_at_0.9"][pol] = goodput_at(
            [(r, a, g) for r, a, g, _ in rows], 0.9)
    if "polyserve" in spec.policies:
        baselines = [p for p in spec.policies if p != "polyserve"]
        if baselines:
            best = max(summary["goodput_at_0.9"][p] for p in baselines)
            ours = summary["goodput_at_0.9"]["polyserve"]
            summary["ratio_vs_best_baseline"] = (ours / best if best > 0
                                                 else float("inf"))
        # Per-tier spread at the operating point nearest goodput_at(0.9).
        op = summary["goodput_at_0.9"]["polyserve"]
        op_rate = min(rates, key=lambda r: abs(r - op)) if op > 0 else rates[0]
        tiers: dict[int, list[float]] = {}
        for j, m in results.items():
            if j.policy == "polyserve" and j.rate_rps == op_rate:
                for tid, att in m.per_tier_attainment.items():
                    tiers.setdefault(tid, []).append(att)
        summary["per_tier_attainment"] = {
            str(t): mean(v) for t, v in sorted(tiers.items())}
        summary["operating_rate_rps"] = op_rate
    with open(os.path.join(
            spec.out_dir, f"{tag}_{spec.preset}_{spec.architecture}_summary.json"),
            "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    summary["rows"] = per_policy_rows
    return summary


def run_server_scaling(spec: ExperimentSpec, counts: Sequence[int],
                       rate_fraction: float = 0.8,
                       model: Optional[PerfModel] = None) -> list[dict]:
    """Goodput/attainment vs instance count at a fixed relative rate."""
    model = model or default_model()
    preset = PRESETS[spec.preset]
    rows = []
    for n in counts:
        base = capacity_rate(model, preset, spec.architecture, n)
        rate = round(rate_fraction * base, 4)
        jobs = [SimJob(spec.preset, spec.architecture, "polyserve", rate,
                       spec.n_requests, n, seed) for seed in spec.seeds]
        results = run_jobs(jobs)
        rows.append({
            "servers": n, "rate_rps": rate,
            "attainment": mean(m.attainment for m in results.values()),
            "goodput": mean(m.goodput_rps for m in results.values()),
            "cost_per_req_us": mean(m.cost_per_req_us for m in results.values()),
            "scaling_events": mean(m.scaling_events for m in results.values()),
        })
    os.makedirs(spec.out_dir, exist_ok=True)
    path = os.path.join(spec.out_dir,
                        f"servers_{spec.preset}_{spec.architecture}.csv")
    with open(path, "w") as f:
        f.write("servers,rate,attainment,goodput,cost_per_req,scaling_events\n")
        for r in rows:
            f.write(f"{r['servers']},{r['rate_rps']:.4f},{r['attainment']:.6f},"
                    f"{r['goodput']:.4f},{r['cost_per_req_us']:.1f},"
                    f"{r['scaling_events']:.1f}\n")
    return rows


def default_capacity_points() -> list[WorkloadPoint]:
    """The capacity/cost sweep grid, anchored at the (1000, 4000) and
    (8000, 2000) length mixes."""
    points = []
    for p, d in ((1000, 4000), (8000, 2000)):
        for tpot_ms in (20, 30, 40, 50, 60, 80, 100):
            points.append(WorkloadPoint(p, d, UNBOUNDED_US, tpot_ms * 1000))
    return points


def run_analyze(out_dir: str, model: Optional[PerfModel] = None,
                points: Optional[Sequence[WorkloadPoint]] = None) -> str:
    model = model or default_model()
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "capacity_sweep.csv")
    with open(path, "w") as f:
        capacity.sweep_curves(model, points or default_capacity_points(), f)
    return path


# ---------------------------------------------------------------------------
# Scheduler-throughput microbenchmark
# ---------------------------------------------------------------------------


class _BenchTable:
    """Minimal request-table stand-in for the routing benchmark."""

    def __init__(self, rng: np.random.Generator, n: int, tiers) -> None:
        self.p = rng.integers(1, 1025, size=n)
        self.gen = rng.integers(0, 256, size=n)
        self.d = np.full(n, 4096, dtype=np.int64)
        tier_ids = rng.integers(0, len(tiers), size=n)
        self.tier = np.asarray([tiers[i].id for i in tier_ids])
        self.tpot = np.asarray([tiers[i].tpot_us for i in tier_ids])
        self.ttft = np.full(n, 1_000_000, dtype=np.int64)
        self.arr = np.zeros(n, dtype=np.int64)


def build_bench_cluster(n_servers: int, seed: int = 0,
                        model: Optional[PerfModel] = None,
                        residents_per_server: int = 40) -> tuple[Cluster, int]:
    """A synthetic steady-state cluster for the routing benchmark."""
    model = model or default_model()
    tiers = workload.default_tiers()
    cfg = SchedulerConfig(policy="polyserve", avg_decode_len=512)
    cluster = Cluster(n_servers, tiers, cfg, model, seed=seed)
    rng = np.random.default_rng(seed)
    n_candidates = 4096
    n_resident = n_servers * residents_per_server
    table = _BenchTable(rng, n_resident + n_candidates, tiers)
    cluster.table = table
    # Assign every server to a tier round-robin and seed residents.
    rid = 0
    for i, s in enumerate(cluster.servers):
        tier = cluster.tiers[tiers[i % len(tiers)].id]
        cluster.pool.remove(s)
        s.tier_id = tier.id
        s.tier_tpot_us = tier.tpot_us
        s.ordinal = tier.next_ordinal
        tier.next_ordinal += 1
        tier.servers.append(s)
        ids = np.arange(rid, rid + residents_per_server, dtype=np.int64)
        # Residents must respect tier binning; overwrite tier/tpot.
        table.tier[ids] = tier.id
        table.tpot[ids] = tier.tpot_us
        s.req_ids = ids
        s.kv_total = int((table.p[ids] + table.gen[ids]).sum())
        s.busy = True
        s.iter_end_us = 5_000
        rid += residents_per_server
    return cluster, n_resident


def sched_bench(n_servers: int = 20, n_decisions: int = 200_000,
                seed: int = 0, model: Optional[PerfModel] = None) -> dict:
    """Measure route_decode_polyserve decisions/second on a synthetic cluster.

    Decisions are evaluated without applying them, so every call sees the
    same state and the outcome stream is deterministic.
    """
    cluster, cand_base = build_bench_cluster(n_servers, seed=seed, model=model)
    n_cand = len(cluster.table.p) - cand_base
    route = cluster.route_decode_polyserve
    now = 0
    lat: list[float] = []
    sample_every = max(1, n_decisions // 1000)
    outcomes = {o: 0 for o in Outcome}
    t0 = time.perf_counter()
    for i in range(n_decisions):
        rid = cand_base + (i % n_cand)
        if i % sample_every == 0:
            s0 = time.perf_counter()
            dec = route(rid, now)
            lat.append(time.perf_counter() - s0)
        else:
            dec = route(rid, now)
        outcomes[dec.outcome] += 1
    elapsed = time.perf_counter() - t0
    lat.sort()
    return {
        "servers": n_servers,
        "decisions": n_decisions,
        "elapsed_s": elapsed,
        "decisions_per_s": n_decisions / elapsed,
        "latency_p50_us": lat[len(lat) // 2] * 1e6,
        "latency_p99_us": lat[int(len(lat) * 0.99)] * 1e6,
        "outcomes": {o.value: c for o, c in outcomes.items() if c},
    }
