"""Request-stream generation.

Trace ingestion, uniform synthesis, SLO tier assignment with an
idle-server achievability filter, and Poisson arrivals quantized to the
simulation tick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .perf_model import PerfModel
from .scheduler import dynamic_chunk_plan

TICK_US = 1_000
BEST_EFFORT_US = 43_200_000_000  # nominal 12h SLO, effectively unbounded
BEST_EFFORT_TIER_ID = -1


class TraceError(ValueError):
    """Raised for malformed trace files."""


@dataclass(frozen=True)
class SloTier:
    """One (TTFT, TPOT) service tier; tier 0 is the tightest TPOT."""

    id: int
    ttft_us: int
    tpot_us: int

    def __post_init__(self) -> None:
        if self.ttft_us <= 0 or self.tpot_us <= 0:
            raise ValueError("ttft and tpot must be positive")


@dataclass(frozen=True)
class Request:
    """One inference job. ``d_true`` is hidden from the scheduler."""

    id: int
    arrival_us: int
    p: int
    d_true: int
    tier_id: int          # BEST_EFFORT_TIER_ID for best-effort
    ttft_us: int          # effective per-request TTFT
    tpot_us: int

    @property
    def best_effort(self) -> bool:
        return self.tier_id == BEST_EFFORT_TIER_ID


@dataclass(frozen=True)
class TierDistribution:
    tiers: tuple[tuple[SloTier, float], ...]
    ttft_choices: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        for probs in (
            [p for _, p in self.tiers],
            [p for _, p in self.ttft_choices],
        ):
            if any(p < 0 for p in probs):
                raise ValueError("probabilities must be >= 0")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError("probabilities must sum to 1")
        tpots = [t.tpot_us for t, _ in self.tiers]
        if len(set(tpots)) != len(tpots):
            raise ValueError("tier tpot values must be unique")
        if tpots != sorted(tpots):
            raise ValueError("tiers must be sorted tpot-ascending")


def default_tiers() -> tuple[SloTier, ...]:
    """20/30/50/100 ms TPOT tiers (nominal TTFT 1 s)."""
    return tuple(
        SloTier(id=i, ttft_us=1_000_000, tpot_us=tpot)
        for i, tpot in enumerate((20_000, 30_000, 50_000, 100_000))
    )


def default_distribution() -> TierDistribution:
    """TPOT tiers at 10/20/30/40%, TTFT uniform over 300/500/1000 ms."""
    tiers = default_tiers()
    return TierDistribution(
        tiers=tuple(zip(tiers, (0.10, 0.20, 0.30, 0.40))),
        ttft_choices=((300_000, 1 / 3), (500_000, 1 / 3), (1_000_000, 1 / 3)),
    )


def inverted_distribution() -> TierDistribution:
    """The burst-phase inversion: 40/30/20/10% tightest-first."""
    tiers = default_tiers()
    return TierDistribution(
        tiers=tuple(zip(tiers, (0.40, 0.30, 0.20, 0.10))),
        ttft_choices=((300_000, 1 / 3), (500_000, 1 / 3), (1_000_000, 1 / 3)),
    )


def load_trace(path: str, fmt: str = "lengths_csv") -> list[tuple[int, int]]:
    """Load (input_len, output_len) pairs; zero lengths clamp to 1."""
    pairs: list[tuple[int, int]] = []
    if fmt == "lengths_csv":
        with open(path, newline="") as f:
            lines = f.read().splitlines()
        if not lines:
            return []
        header = [h.strip() for h in lines[0].split(",")]
        try:
            i_in, i_out = header.index("input_len"), header.index("output_len")
        except ValueError as exc:
            raise TraceError("missing input_len/output_len columns") from exc
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            cols = line.split(",")
            try:
                p, d = int(cols[i_in]), int(cols[i_out])
            except (IndexError, ValueError) as exc:
                raise TraceError(f"malformed row at line {lineno}: {line!r}") from exc
            pairs.append((max(1, p), max(1, d)))
    elif fmt == "lengths_jsonl":
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    p, d = int(obj["input_len"]), int(obj["output_len"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise TraceError(f"malformed row at line {lineno}") from exc
                pairs.append((max(1, p), max(1, d)))
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return pairs


def synthesize_uniform(n: int, max_in: int, max_out: int, seed: int) -> list[tuple[int, int]]:
    """n pairs with both coordinates uniform on [1, max]; deterministic per seed."""
    if n < 0 or max_in < 1 or max_out < 1:
        raise ValueError("need n >= 0 and bounds >= 1")
    rng = np.random.default_rng(seed)
    ps = rng.integers(1, max_in + 1, size=n)
    ds = rng.integers(1, max_out + 1, size=n)
    return list(zip(ps.tolist(), ds.tolist()))


def single_prefill_time_us(model: PerfModel, p: int, budget: int,
                           _cache: dict | None = None) -> int:
    """Prefill time of a lone request on an idle server (dynamic chunking)."""
    key = (id(model), p, budget)
    if _cache is not None and key in _cache:
        return _cache[key]
    done = 0
    total = 0
    for chunk in dynamic_chunk_plan(p, budget):
        done += chunk
        total += model.iteration_time(chunk, done, chunk)
    if _cache is not None:
        _cache[key] = total
    return total


def assign_slos(pairs: Sequence[tuple[int, int]], dist: TierDistribution,
                model: PerfModel, seed: int,
                prefill_budget: int = 2048) -> list[Request]:
    """Draw (ttft, tpot) per request with the idle-server achievability filter.

    An infeasible TPOT draw cascades to looser tiers; an infeasible TTFT
    draw cascades to looser TTFT choices. If the loosest of either still
    fails the request is tagged best-effort. Arrivals are left at 0.
    """
    rng = np.random.default_rng(seed)
    n = len(pairs)
    tier_objs = [t for t, _ in dist.tiers]
    tier_probs = [pr for _, pr in dist.tiers]
    ttft_vals = [v for v, _ in dist.ttft_choices]
    ttft_probs = [pr for _, pr in dist.ttft_choices]
    ttft_sorted = sorted(set(ttft_vals))
    tier_draw = rng.choice(len(tier_objs), size=n, p=tier_probs)
    ttft_draw = rng.choice(len(ttft_vals), size=n, p=ttft_probs)

    pf_cache: dict = {}
    out: list[Request] = []
    for i, (p, d) in enumerate(pairs):
        ti = int(tier_draw[i])
        tier = tier_objs[ti]
        ttft = ttft_vals[int(ttft_draw[i])]
        # TPOT achievability: a lone request's decode iteration must fit.
        tpot_floor = model.iteration_time(1, p + d, 0)
        while tier is not None and tier.tpot_us < tpot_floor:
            ti += 1
            tier = tier_objs[ti] if ti < len(tier_objs) else None
        # TTFT achievability: a lone request's prefill must fit.
        pf = single_prefill_time_us(model, p, prefill_budget, pf_cache)
        while ttft is not None and pf > ttft:
            looser = [v for v in ttft_sorted if v > ttft]
            ttft = looser[0] if looser else None
        if tier is None or ttft is None:
            out.append(Request(id=i, arrival_us=0, p=p, d_true=d,
                               tier_id=BEST_EFFORT_TIER_ID,
                               ttft_us=BEST_EFFORT_US, tpot_us=BEST_EFFORT_US))
        else:
            out.append(Request(id=i, arrival_us=0, p=p, d_true=d,
                               tier_id=tier.id, ttft_us=ttft,
                               tpot_us=tier.tpot_us))
    return out


def generate_arrivals(requests: Sequence[Request], rate_per_s: float,
                      seed: int) -> list[Request]:
    """Poisson arrivals: exponential gaps, rounded to the 1 ms tick."""
    if rate_per_s <= 0:
        raise ValueError("rate must be positive")
    rng = np.random.default_rng(seed)
    gaps_us = rng.exponential(1e6 / rate_per_s, size=len(requests))
    times = np.cumsum(gaps_us)
    ticks = (np.round(times / TICK_US) * TICK_US).astype(np.int64)
    return [replace(r, arrival_us=int(t)) for r, t in zip(requests, ticks)]


def burst_flip(pairs: Sequence[tuple[int, int]], split_index: int,
               dist_a: TierDistribution, dist_b: TierDistribution,
               model: PerfModel, seeds: tuple[int, int],
               prefill_budget: int = 2048) -> list[Request]:
    """Tier the first ``split_index`` pairs by dist_a, the rest by dist_b."""
    if not 0 <= split_index <= len(pairs):
        raise ValueError("split_index out of range")
    first = assign_slos(pairs[:split_index], dist_a, model, seeds[0],
                        prefill_budget=prefill_budget)
    second = assign_slos(pairs[split_index:], dist_b, model, seeds[1],
                         prefill_budget=prefill_budget)
    out = first + [replace(r, id=r.id + split_index) for r in second]
    return out


WORKLOAD_DUMP_FIELDS = ("id", "arrival_us", "p", "d", "tier_ttft_us", "tier_tpot_us")


def dump_workload(requests: Iterable[Request], out) -> None:
    """JSONL dump: one object per request."""
    for r in requests:
        out.write(json.dumps({
            "id": r.id, "arrival_us": r.arrival_us, "p": r.p, "d": r.d_true,
            "tier_ttft_us": r.ttft_us, "tier_tpot_us": r.tpot_us,
        }) + "\n")


def mean_decode_len(pairs: Sequence[tuple[int, int]]) -> int:
    """Trace-mean decode length, the scheduler's output-length predictor."""
    if not pairs:
        return 1
    return max(1, round(sum(d for _, d in pairs) / len(pairs)))
