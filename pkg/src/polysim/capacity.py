"""Closed-form capacity math for both serving architectures.

Maximum batch size under (TTFT, TPOT, memory) constraints and the
per-request serving cost, for prefill-decode disaggregation (PD) and
co-location (CO).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable

from .perf_model import PerfModel

# TTFT sentinel treated as "no TTFT constraint".
UNBOUNDED_US = 43_200_000_000  # 12 hours


class Binding(str, Enum):
    TPOT = "tpot"
    TTFT = "ttft"
    MEMORY = "memory"
    NONE_FEASIBLE = "none_feasible"


class InfeasibleError(ValueError):
    """No batch size satisfies the constraints."""


@dataclass(frozen=True)
class WorkloadPoint:
    p: int
    d: int
    ttft_us: int
    tpot_us: int

    def __post_init__(self) -> None:
        if self.p < 1 or self.d < 1:
            raise ValueError("p and d must be >= 1")
        if self.ttft_us <= 0 or self.tpot_us <= 0:
            raise ValueError("ttft and tpot must be positive")


@dataclass(frozen=True)
class BatchLimit:
    batch: int
    binding: Binding


def kv_per_request(w: WorkloadPoint) -> float:
    """Mean resident KV per decode request: p + d/2."""
    return w.p + w.d / 2


def pd_iter_time(model: PerfModel, w: WorkloadPoint, batch: int) -> int:
    """Decode-cluster iteration time at decode batch size ``batch``."""
    return model.iteration_time(batch, batch * kv_per_request(w), 0)


def co_kv(w: WorkloadPoint, batch: int) -> float:
    """Resident KV on a co-located server at token batch size ``batch``."""
    return w.d / (w.p + w.d) * batch * kv_per_request(w) + w.p


def co_iter_time(model: PerfModel, w: WorkloadPoint, batch: int) -> int:
    """Co-located iteration time at token batch size ``batch``.

    Prefill attention is folded into the decode-attention term via the +p
    KV contribution, so no separate chunk term is applied.
    """
    return model.iteration_time(batch, co_kv(w, batch), 0)


def max_decode_batch_pd(model: PerfModel, w: WorkloadPoint) -> BatchLimit:
    """Largest decode batch meeting TPOT and memory on a PD decode server."""
    kv_req = kv_per_request(w)
    b_mem = int(model.kv_capacity // kv_req)

    def tpot_ok(b: int) -> bool:
        return pd_iter_time(model, w, b) <= w.tpot_us

    if b_mem < 1 or not tpot_ok(1):
        return BatchLimit(0, Binding.NONE_FEASIBLE)
    # Iteration time is monotone in batch, so bisect the TPOT bound.
    lo, hi = 1, b_mem
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if tpot_ok(mid):
            lo = mid
        else:
            hi = mid - 1
    batch = lo
    if not tpot_ok(batch + 1):
        return BatchLimit(batch, Binding.TPOT)
    return BatchLimit(batch, Binding.MEMORY)


def max_token_batch_co(model: PerfModel, w: WorkloadPoint) -> BatchLimit:
    """Largest token batch meeting TPOT, TTFT and memory on a CO server.

    TTFT feasibility (n_iter * t_iter) is not monotone in the batch size,
    so candidates are scanned downward from the TPOT/memory bound.
    """
    total = w.p + w.d
    kv_req = kv_per_request(w)
    # Memory: d/(p+d) * B * (p+d/2) + p <= C.
    cap = model.kv_capacity - w.p
    b_mem = int(cap * total // (w.d * kv_req)) if cap > 0 else 0

    def tpot_ok(b: int) -> bool:
        return co_iter_time(model, w, b) <= w.tpot_us

    if b_mem < 1 or not tpot_ok(1):
        return BatchLimit(0, Binding.NONE_FEASIBLE)
    lo, hi = 1, b_mem
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if tpot_ok(mid):
            lo = mid
        else:
            hi = mid - 1
    b_ub = lo

    def ttft_ok(b: int) -> bool:
        if w.ttft_us >= UNBOUNDED_US:
            return True
        n_iter = total / b
        return n_iter * co_iter_time(model, w, b) <= w.ttft_us

    for b in range(b_ub, 0, -1):
        if ttft_ok(b):
            bind = Binding.TTFT if b < b_ub else (
                Binding.TPOT if not tpot_ok(b_ub + 1) else Binding.MEMORY)
            return BatchLimit(b, bind)
    return BatchLimit(0, Binding.NONE_FEASIBLE)


DEFAULT_PREFILL_BATCH_CAP = 2048


def prefill_batch_limit(model: PerfModel, w: WorkloadPoint,
                        cap: int = DEFAULT_PREFILL_BATCH_CAP) -> int:
    """Prefill batch: min(cap, largest B whose full-prefill iteration fits TTFT)."""
    def ok(b: int) -> bool:
        return model.iteration_time(b, b, b) <= w.ttft_us

    if not ok(1):
        return 1  # prefill must run regardless; one token per iteration floor
    lo, hi = 1, cap
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def cost_pd(model: PerfModel, w: WorkloadPoint,
            b_pf_cap: int = DEFAULT_PREFILL_BATCH_CAP) -> float:
    """Per-request serving cost (instance-microseconds), PD architecture."""
    lim = max_decode_batch_pd(model, w)
    if lim.batch < 1:
        raise InfeasibleError(f"no feasible decode batch for {w}")
    b_dc = lim.batch
    b_pf = prefill_batch_limit(model, w, cap=b_pf_cap)
    return (
        w.p * model.gemm_component(b_pf) / b_pf
        + model.prefill_component(w.p)
        + w.d * model.gemm_component(b_dc) / b_dc
        + model.attn_component(w.d * kv_per_request(w))
    )


def cost_co(model: PerfModel, w: WorkloadPoint) -> float:
    """Per-request serving cost (instance-microseconds), CO architecture."""
    lim = max_token_batch_co(model, w)
    if lim.batch < 1:
        raise InfeasibleError(f"no feasible token batch for {w}")
    b = lim.batch
    return (
        (w.p + w.d) * model.gemm_component(b) / b
        + model.prefill_component(w.p)
        + model.attn_component(w.d * kv_per_request(w))
    )


SWEEP_HEADER = ["arch", "p", "d", "ttft_us", "tpot_us", "batch", "binding",
                "cost_instance_us"]


def sweep_rows(model: PerfModel, points: Iterable[WorkloadPoint]) -> list[dict]:
    """One PD row and one CO row per workload point."""
    rows = []
    for w in points:
        for arch, lim_fn, cost_fn in (
            ("pd", max_decode_batch_pd, cost_pd),
            ("co", max_token_batch_co, cost_co),
        ):
            lim = lim_fn(model, w)
            cost = f"{cost_fn(model, w):.1f}" if lim.batch >= 1 else ""
            rows.append({
                "arch": arch, "p": w.p, "d": w.d,
                "ttft_us": w.ttft_us, "tpot_us": w.tpot_us,
                "batch": lim.batch, "binding": lim.binding.value,
                "cost_instance_us": cost,
            })
    return rows


def sweep_curves(model: PerfModel, points: Iterable[WorkloadPoint], out: IO[str]) -> int:
    """Write the capacity/cost sweep CSV; returns the row count."""
    writer = csv.DictWriter(out, fieldnames=SWEEP_HEADER, lineterminator="\n")
    writer.writeheader()
    rows = sweep_rows(model, points)
    writer.writerows(rows)
    return len(rows)
