"""Routing and autoscaling decisions.

Pure decision logic over cluster state: TPOT-tiered request binning,
load-gradient routing (highest-load feasible server), lazy promotion,
pending-list scale-down, dynamic chunking for disaggregated prefill,
continuous chunked-prefill prediction for co-location, plus the three
baseline policies (random, minimal, chunk_static).

All times are integer microseconds. The simulator owns the mutable state;
the decision functions here only read it and return decisions.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

BEST_EFFORT_TIER_ID = -1


class Role(Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    COLOCATED = "colocated"


class Outcome(Enum):
    ASSIGN = "assign"
    SCALE_UP_THEN_ASSIGN = "scale_up_then_assign"
    PROMOTE = "promote"
    QUEUE = "queue"
    REJECT = "reject"


@dataclass
class RoutingDecision:
    outcome: Outcome
    server_id: Optional[int] = None
    tier_id: Optional[int] = None
    predicted_iter_us: Optional[int] = None
    predicted_wait_us: Optional[int] = None
    evidence: Optional[list] = None  # (server_id, feasible, pred_iter, ordinal, reason)
    # Queue outcomes only: whether the decision can flip with time alone
    # (while a server is busy, wait plus work versus slack is fixed, so
    # only state changes or the deadline passing can help) and which tiers
    # were scanned (None = depends on global state).
    time_sensitive: bool = False
    scanned_tiers: Optional[tuple] = None


@dataclass
class SchedulerConfig:
    policy: str = "polyserve"          # polyserve | random | minimal | chunk_static
    architecture: str = "pd"           # pd | co
    token_budget: int = 2048           # prefill chunk budget (PD) / static budget
    avg_decode_len: int = 256          # output-length predictor (trace mean)
    autoscale_period_us: int = 10_000
    kv_transfer_latency_us: int = 0    # PD prefill -> decode handoff
    kv_headroom: int = -1              # admission margin below the hard KV
                                       # limit; -1 = auto (capacity / 32)
    static_prefill_servers: int = 0    # PD baselines; 0 = auto from cost share
    co_tier_budgets: Optional[dict] = None  # tier_id -> token budget (CO)

    def __post_init__(self) -> None:
        if self.token_budget < 1:
            raise ValueError("token budget must be >= 1")
        if self.avg_decode_len < 1:
            raise ValueError("average decode length must be >= 1")


def dynamic_chunk_plan(p_remaining: int, budget: int) -> list[int]:
    """Chunk schedule for a prefill of ``p_remaining`` tokens.

    Emits budget-sized chunks while at least two budgets remain, then one
    final chunk carrying everything left (size in [1, 2*budget)).
    """
    if p_remaining < 1 or budget < 1:
        raise ValueError("need p_remaining >= 1 and budget >= 1")
    chunks = []
    rem = p_remaining
    while rem >= 2 * budget:
        chunks.append(budget)
        rem -= budget
    chunks.append(rem)
    return chunks


def predict_peak_kv(residents: Sequence[tuple[int, int]], cand_kv: int,
                    cand_remaining: int) -> int:
    """Peak total KV if the candidate is admitted.

    ``residents`` are (current KV, predicted remaining decode tokens)
    pairs. Every request grows one token per iteration until its predicted
    completion; the total is maximal just before each completion event, so
    the peak is the max over those events.
    """
    items = sorted(list(residents) + [(cand_kv, cand_remaining)],
                   key=lambda x: x[1])
    n = len(items)
    suffix_kv = 0
    totals = []
    # Walk from the longest-remaining end accumulating suffix KV sums.
    suffixes = [0] * n
    for i in range(n - 1, -1, -1):
        suffix_kv += items[i][0]
        suffixes[i] = suffix_kv
    peak = 0
    for i in range(n):
        rem = items[i][1]
        total = suffixes[i] + rem * (n - i)
        if total > peak:
            peak = total
    return peak


class PrefillJob:
    """In-flight chunked prefill of one request."""

    __slots__ = ("rid", "p", "chunks", "ci", "kv_done", "deadline_us",
                 "chunk_size", "iter_times_us")

    def __init__(self, rid: int, p: int, chunks: list[int], deadline_us: int,
                 chunk_size: int = 0):
        self.rid = rid
        self.p = p
        self.chunks = chunks
        self.ci = 0
        self.kv_done = 0
        self.deadline_us = deadline_us
        self.chunk_size = chunk_size  # CO: fixed per-iteration chunk
        self.iter_times_us: list[int] = []

    def next_chunk(self) -> int:
        return self.chunks[self.ci] if self.ci < len(self.chunks) else 0

    def remaining_chunks(self) -> int:
        return len(self.chunks) - self.ci


def prefill_plan_times(model, p: int, budget: int) -> list[int]:
    """Per-chunk iteration times of a lone dynamic-chunked prefill."""
    done = 0
    out = []
    for c in dynamic_chunk_plan(p, budget):
        done += c
        out.append(model.iteration_time(c, done, c))
    return out


class Server:
    """One serving instance and its router-visible state."""

    __slots__ = (
        "id", "role", "tier_id", "tier_tpot_us", "pending", "ordinal",
        "req_ids", "join_buf", "prefill_jobs", "kv_total",
        "busy", "iter_start_us", "iter_end_us",
        "grow_ids", "chunk_commits", "pending_work_us",
        "assigned_since_us", "assigned_us",
        "_dirty", "_rs", "_suf", "_maxa", "_maxb", "_m", "_rs_np", "_suf_np",
        "_chunk_dirty", "_chunk_total",
        "cluster",
    )

    def __init__(self, sid: int, cluster):
        self.id = sid
        self.cluster = cluster
        self.role = Role.DECODE
        self.tier_id: Optional[int] = None
        self.tier_tpot_us = 0
        self.pending = False
        self.ordinal = -1
        self.req_ids = np.empty(0, dtype=np.int64)
        self.join_buf: list[int] = []
        self.prefill_jobs: list[PrefillJob] = []
        self.kv_total = 0
        self.busy = False
        self.iter_start_us = 0
        self.iter_end_us = 0
        self.grow_ids = np.empty(0, dtype=np.int64)
        self.chunk_commits: list[tuple[PrefillJob, int]] = []
        self.pending_work_us = 0
        self.assigned_since_us: Optional[int] = None
        self.assigned_us = 0
        self._dirty = True
        self._rs: list[int] = []
        self._suf: list[int] = []
        self._maxa: list[int] = []
        self._maxb: list[int] = []
        self._m = 0
        self._rs_np = np.empty(0, dtype=np.int64)
        self._suf_np = np.zeros(1, dtype=np.int64)
        self._chunk_dirty = True
        self._chunk_total = 0

    # -- state queries ----------------------------------------------------

    def n_decode(self) -> int:
        return len(self.req_ids) + len(self.join_buf)

    def is_empty(self) -> bool:
        return (len(self.req_ids) == 0 and not self.join_buf
                and not self.prefill_jobs)

    def wait_us(self, now_us: int) -> int:
        return max(0, self.iter_end_us - now_us) if self.busy else 0

    def next_chunk_tokens(self) -> int:
        if self._chunk_dirty:
            self._chunk_total = sum(j.next_chunk() for j in self.prefill_jobs)
            self._chunk_dirty = False
        return self._chunk_total

    def resident_summaries(self) -> list[tuple[int, int]]:
        """(kv, predicted remaining) pairs for every resident."""
        t = self.cluster.table
        avg_d = self.cluster.cfg.avg_decode_len
        out = []
        for rid in self.req_ids.tolist() + self.join_buf:
            gen = int(t.gen[rid])
            out.append((int(t.p[rid]) + gen, max(1, avg_d - gen)))
        for job in self.prefill_jobs:
            out.append((job.p, avg_d))  # conservative: full prompt KV
        return out

    # -- peak-KV cache -----------------------------------------------------

    def _invalidate(self) -> None:
        self._dirty = True
        self._chunk_dirty = True

    def _rebuild_cache(self) -> None:
        t = self.cluster.table
        avg_d = self.cluster.cfg.avg_decode_len
        ids = self.req_ids
        if self.join_buf:
            ids = np.concatenate([ids, np.asarray(self.join_buf, dtype=np.int64)])
        if len(ids):
            gen = t.gen[ids]
            kv = t.p[ids] + gen
            rem = np.maximum(1, avg_d - gen)
        else:
            kv = np.empty(0, dtype=np.int64)
            rem = np.empty(0, dtype=np.int64)
        if self.prefill_jobs:
            kv = np.concatenate([kv, np.asarray([j.p for j in self.prefill_jobs],
                                                dtype=np.int64)])
            rem = np.concatenate([rem, np.full(len(self.prefill_jobs), avg_d,
                                               dtype=np.int64)])
        m = len(rem)
        self._m = m
        if m == 0:
            self._rs = []
            self._suf = []
            self._maxa = []
            self._maxb = []
            self._rs_np = np.empty(0, dtype=np.int64)
            self._suf_np = np.zeros(1, dtype=np.int64)
        else:
            order = np.argsort(rem, kind="stable")
            rs = rem[order]
            kvs = kv[order]
            suf = np.cumsum(kvs[::-1])[::-1]
            base = suf + rs * np.arange(m, 0, -1)
            self._rs = rs.tolist()
            self._suf = suf.tolist()
            self._maxa = np.maximum.accumulate(base + rs).tolist()
            self._maxb = np.maximum.accumulate(base[::-1])[::-1].tolist()
            self._rs_np = rs.astype(np.int64)
            self._suf_np = np.concatenate(
                [suf.astype(np.int64), np.zeros(1, dtype=np.int64)])
        self._dirty = False

    def peak_kv_with(self, cand_kv: int, cand_rem: int) -> int:
        """Fast-path peak; exactly equals predict_peak_kv on the summaries."""
        if self._dirty:
            self._rebuild_cache()
        m = self._m
        if m == 0:
            return cand_kv + cand_rem
        rs = self._rs
        i0 = bisect_left(rs, cand_rem)
        peak = cand_kv + cand_rem + (
            self._suf[i0] + cand_rem * (m - i0) if i0 < m else 0)
        ir = bisect_right(rs, cand_rem)
        if ir:
            v = self._maxa[ir - 1] + cand_kv
            if v > peak:
                peak = v
        if ir < m:
            v = self._maxb[ir]
            if v > peak:
                peak = v
        return peak


def decode_feasible(server: Server, cand_kv: int, cand_remaining: int,
                    next_deadline_us: int, now_us: int, model,
                    tier_tpot_us: Optional[int] = None,
                    relax_deadline: bool = False,
                    exact: bool = False) -> tuple[bool, int, int, str]:
    """Can this server admit one more decode request?

    Returns (feasible, predicted iteration time, wait, reason). Feasible
    iff the predicted post-admit iteration (at the predicted peak KV) fits
    the server tier's TPOT and wait + iteration fits the candidate's
    next-token deadline, with KV staying under capacity.
    """
    tpot = server.tier_tpot_us if tier_tpot_us is None else tier_tpot_us
    wait = server.wait_us(now_us)
    cap_eff = server.cluster.cap_eff
    if server.kv_total + cand_kv > cap_eff:
        return False, 0, wait, "memory"
    chunk = server.next_chunk_tokens()
    batch = server.n_decode() + 1 + chunk
    # Current KV lower-bounds the predicted peak, so a TPOT miss here is
    # final and skips the peak computation.
    pred_lb = model.iteration_time(batch, server.kv_total + cand_kv, chunk)
    if pred_lb > tpot:
        return False, pred_lb, wait, "tpot"
    if exact:
        peak = predict_peak_kv(server.resident_summaries(), cand_kv, cand_remaining)
    else:
        peak = server.peak_kv_with(cand_kv, cand_remaining)
    if peak > cap_eff:
        return False, 0, wait, "memory"
    pred = model.iteration_time(batch, peak, chunk)
    if pred > tpot:
        return False, pred, wait, "tpot"
    if not relax_deadline and wait + pred > next_deadline_us - now_us:
        return False, pred, wait, "wait"
    return True, pred, wait, "ok"


def _residents_meet_ttft(server: Server, wait: int, prefix: list,
                         total: int, now_us: int) -> bool:
    """Would every in-flight prefill still meet its own TTFT deadline with
    the candidate's chunks slowing the shared iterations?

    ``prefix[k]`` is the predicted duration of the first k post-admit
    iterations. A resident needing more iterations than the candidate's
    prefill is bounded with the last candidate-loaded iteration time, which
    is conservative once the candidate's chunks stop. Residents that are
    already past saving cannot veto an admission.
    """
    jobs = server.prefill_jobs
    if not jobs:
        return True
    n = len(prefix) - 1
    last_it = prefix[n] - prefix[n - 1]
    for j in jobs:
        slack = j.deadline_us - now_us
        if slack <= wait:
            continue
        rem = j.remaining_chunks()
        t_j = prefix[rem] if rem <= n else total + (rem - n) * last_it
        if wait + t_j > slack:
            return False
    return True


def admit_co(server: Server, p: int, arrival_ttft_deadline_us: int,
             next_token_tpot_us: int, now_us: int, model,
             budget: int, tier_tpot_us: Optional[int] = None,
             relax_deadline: bool = False,
             exact: bool = False) -> tuple[bool, int, int, int, str]:
    """Continuous chunked-prefill admission check for co-location.

    Predicts every prefill iteration with the decode KV trajectory grown
    per the peak-KV model; admits only if each iteration fits the server
    tier's TPOT, the whole prefill (plus wait) fits the TTFT deadline, and
    memory holds at the trajectory peak.

    Returns (feasible, chunk size, first predicted iteration, wait, reason).
    """
    tpot = server.tier_tpot_us if tier_tpot_us is None else tier_tpot_us
    wait = server.wait_us(now_us)
    cap_eff = server.cluster.cap_eff
    other_chunk = server.next_chunk_tokens()
    n_dec = server.n_decode()
    c = budget - n_dec - other_chunk
    if c <= 0:
        return False, 0, 0, wait, "chunk"
    n_chunks = math.ceil(p / c)

    if exact:
        # Reference scalar walk over the predicted trajectory.
        summaries = sorted(server.resident_summaries(), key=lambda x: x[1])
        rs = [r for _, r in summaries]
        suf = [0] * (len(summaries) + 1)
        for i in range(len(summaries) - 1, -1, -1):
            suf[i] = suf[i + 1] + summaries[i][0]
        m = len(summaries)
        total = 0
        first_pred = 0
        prefix = [0]
        for k in range(1, n_chunks + 1):
            chunk_k = c if k < n_chunks else p - (k - 1) * c
            i0 = bisect_left(rs, k)
            active = m - i0
            kv_k = suf[i0] + k * active + min(p, k * c)
            if kv_k > cap_eff:
                return False, c, first_pred, wait, "memory"
            batch_k = active + chunk_k + other_chunk
            it_k = model.iteration_time(batch_k, kv_k, chunk_k + other_chunk)
            if k == 1:
                first_pred = it_k
            if it_k > tpot:
                return False, c, first_pred, wait, "tpot"
            total += it_k
            prefix.append(total)
        if not relax_deadline and wait + total > arrival_ttft_deadline_us - now_us:
            return False, c, first_pred, wait, "ttft"
        if not _residents_meet_ttft(server, wait, prefix, total, now_us):
            return False, c, first_pred, wait, "resident"
        return True, c, first_pred, wait, "ok"

    # O(1) pre-rejections, all implied by the trajectory walk below: the
    # first step lower-bounds memory and per-iteration time (predicted
    # remainders are always >= 1, so step 1 holds every resident), and
    # n_chunks times the model floor lower-bounds the total prefill time.
    m = n_dec + len(server.prefill_jobs)
    kv1 = (server.kv_total
           + sum(j.p - j.kv_done for j in server.prefill_jobs)
           + m + min(p, c))
    if kv1 > cap_eff:
        return False, c, 0, wait, "memory"
    chunk1 = c if n_chunks > 1 else p
    it1 = model.iteration_time(m + chunk1 + other_chunk, kv1,
                               chunk1 + other_chunk)
    if it1 > tpot:
        return False, c, it1, wait, "tpot"
    if not relax_deadline:
        floor = getattr(model, "_floor_us", None)
        if floor is None:
            floor = model.iteration_time(0, 0, 0)
            model._floor_us = floor
        if wait + n_chunks * floor > arrival_ttft_deadline_us - now_us:
            return False, c, it1, wait, "ttft"

    if server._dirty:
        server._rebuild_cache()
    if n_chunks <= 32:
        # Short trajectories: the scalar walk beats numpy's call overhead.
        rs = server._rs
        suf = server._suf
        total = 0
        first_pred = 0
        prefix = [0]
        it = model.iteration_time
        for k in range(1, n_chunks + 1):
            chunk_k = c if k < n_chunks else p - (k - 1) * c
            i0 = bisect_left(rs, k)
            active = m - i0
            kv_k = (suf[i0] if i0 < m else 0) + k * active + min(p, k * c)
            if kv_k > cap_eff:
                return False, c, first_pred, wait, "memory"
            it_k = it(active + chunk_k + other_chunk, kv_k,
                      chunk_k + other_chunk)
            if k == 1:
                first_pred = it_k
            if it_k > tpot:
                return False, c, first_pred, wait, "tpot"
            total += it_k
            prefix.append(total)
        if not relax_deadline and wait + total > \
                arrival_ttft_deadline_us - now_us:
            return False, c, first_pred, wait, "ttft"
        if not _residents_meet_ttft(server, wait, prefix, total, now_us):
            return False, c, first_pred, wait, "resident"
        return True, c, first_pred, wait, "ok"

    ks = np.arange(1, n_chunks + 1, dtype=np.int64)
    i0 = np.searchsorted(server._rs_np, ks, side="left")
    active = m - i0
    kv = server._suf_np[i0] + ks * active + np.minimum(p, ks * c)
    chunks = np.full(n_chunks, c, dtype=np.int64)
    chunks[-1] = p - (n_chunks - 1) * c
    times = model.iteration_time_vec(active + chunks + other_chunk, kv,
                                     chunks + other_chunk)
    first_pred = int(times[0])
    mem_bad = kv > cap_eff
    tpot_bad = times > tpot
    if mem_bad.any() or tpot_bad.any():
        k_mem = int(mem_bad.argmax()) if mem_bad.any() else n_chunks
        k_tpot = int(tpot_bad.argmax()) if tpot_bad.any() else n_chunks
        if k_mem <= k_tpot:  # memory is checked first at each step
            return False, c, (0 if k_mem == 0 else first_pred), wait, "memory"
        return False, c, first_pred, wait, "tpot"
    prefix_np = np.cumsum(times)
    total = int(prefix_np[-1])
    if not relax_deadline and wait + total > \
            arrival_ttft_deadline_us - now_us:
        return False, c, first_pred, wait, "ttft"
    prefix = [0] + prefix_np.tolist()
    if not _residents_meet_ttft(server, wait, prefix, total, now_us):
        return False, c, first_pred, wait, "resident"
    return True, c, first_pred, wait, "ok"


# ---------------------------------------------------------------------------
# Cluster state and routing
# ---------------------------------------------------------------------------


@dataclass
class TierState:
    id: int
    tpot_us: int
    servers: list = field(default_factory=list)   # ordinal-ascending
    next_ordinal: int = 0
    queue: list = field(default_factory=list)     # heap of (deadline, seq, rid)
    version: int = 0                              # bumped on state changes


class Cluster:
    """Mutable cluster state shared by the router and the simulator."""

    def __init__(self, n_servers: int, tiers, cfg: SchedulerConfig, model,
                 seed: int = 0, record_decisions: bool = False,
                 audit: bool = False):
        self.cfg = cfg
        self.model = model
        # Admissions keep a margin below the hard KV limit so that the
        # avg-length predictor underestimating many residents at once cannot
        # wedge a server at exactly full KV.
        headroom = cfg.kv_headroom
        if headroom < 0:
            headroom = model.kv_capacity // 32
        self.cap_eff = model.kv_capacity - headroom
        self.table = None  # RequestTable, set by the simulator
        self.tiers = {t.id: TierState(t.id, t.tpot_us) for t in tiers}
        self.tier_order = sorted(self.tiers, key=lambda i: self.tiers[i].tpot_us)
        self.servers = [Server(i, self) for i in range(n_servers)]
        self.pool: list[Server] = list(self.servers)
        self.pending_list: list[Server] = []
        self.prefill_servers: list[Server] = []
        self.prefill_next_ordinal = 0
        self.prefill_queue: list = []     # heap (deadline, seq, rid)
        self.be_queue: list = []          # heap (arrival, seq, rid)
        self.rng = np.random.default_rng(seed)
        self._seq = 0
        self.record_decisions = record_decisions
        self.audit = audit
        self.decisions: list[RoutingDecision] = []
        self.audit_mismatches = 0
        self.audit_checked = 0
        self.pool_version = 0
        self.version = 0
        # Arrival statistics feeding the fair-share server quotas.
        self.tier_arrivals = {t.id: 0 for t in tiers}
        self.arrival_p_sum = 0
        self.arrival_count = 0
        self._quota_cache: Optional[dict] = None
        self._quota_at = 0
        self._pd_bl_cache: dict[int, int] = {}
        # Decayed per-tier SLO outcome counts driving the fairness term of
        # the server quotas.
        self.tier_miss_ewma = {t.id: 0.0 for t in tiers}
        self.tier_ok_ewma = {t.id: 0.0 for t in tiers}
        self.scaling_events: list[tuple[int, str, int, Optional[int]]] = []
        # Baselines: flat server sets, no tiers.
        self.flat_decode: list[Server] = []
        if cfg.policy != "polyserve":
            self._init_baseline()

    # -- baseline setup ----------------------------------------------------

    def _init_baseline(self) -> None:
        cfg = self.cfg
        n = len(self.servers)
        self.pool = []
        if cfg.architecture == "pd":
            n_pf = cfg.static_prefill_servers
            if n_pf <= 0:
                n_pf = max(1, round(n * 0.4))
            n_pf = min(n_pf, n - 1)
            for s in self.servers[:n_pf]:
                s.role = Role.PREFILL
                s.assigned_since_us = 0
                self.prefill_servers.append(s)
            for s in self.servers[n_pf:]:
                s.role = Role.DECODE
                s.tier_tpot_us = 1 << 62
                s.assigned_since_us = 0
                self.flat_decode.append(s)
        else:
            for s in self.servers:
                s.role = Role.COLOCATED
                s.tier_tpot_us = 1 << 62
                s.assigned_since_us = 0
                self.flat_decode.append(s)

    # -- pool / tier transitions -------------------------------------------

    def _acquire(self, tier: TierState, now_us: int, role: Role) -> Server:
        s = min(self.pool, key=lambda x: x.id)
        self.pool.remove(s)
        s.role = role
        s.tier_id = tier.id if tier is not None else None
        s.tier_tpot_us = tier.tpot_us if tier is not None else 0
        s.pending = False
        s.ordinal = tier.next_ordinal
        tier.next_ordinal += 1
        tier.servers.append(s)
        tier.version += 1
        self.pool_version += 1
        s.assigned_since_us = now_us
        self.scaling_events.append((now_us, "scale_up", s.id, tier.id))
        return s

    def _acquire_prefill(self, now_us: int) -> Server:
        s = min(self.pool, key=lambda x: x.id)
        self.pool.remove(s)
        s.role = Role.PREFILL
        s.tier_id = None
        s.tier_tpot_us = 0
        s.pending = False
        s.ordinal = self.prefill_next_ordinal
        self.prefill_next_ordinal += 1
        self.prefill_servers.append(s)
        self.pool_version += 1
        s.assigned_since_us = now_us
        self.scaling_events.append((now_us, "scale_up_prefill", s.id, None))
        return s

    def _release(self, s: Server, now_us: int, event: str) -> None:
        if s.assigned_since_us is not None:
            s.assigned_us += now_us - s.assigned_since_us
            s.assigned_since_us = None
        s.tier_id = None
        s.tier_tpot_us = 0
        s.pending = False
        s.ordinal = -1
        self.pool.append(s)
        self.pool_version += 1
        self.scaling_events.append((now_us, event, s.id, None))

    # -- decode routing (PD decode phase; also best-effort) ------------------

    def _tier_of(self, rid: int) -> Optional[TierState]:
        tid = int(self.table.tier[rid])
        return self.tiers.get(tid)

    def route_decode_polyserve(self, rid: int, now_us: int) -> RoutingDecision:
        """Tiered decode routing: argmax-load feasible home server, then
        pool scale-up, then lazy promotion, else queue."""
        t = self.table
        model = self.model
        gen = int(t.gen[rid])
        cand_kv = int(t.p[rid]) + gen
        cand_rem = max(1, self.cfg.avg_decode_len - gen)
        deadline = int(t.arr[rid] + t.ttft[rid] + (gen + 1) * t.tpot[rid])
        relax = deadline <= now_us
        tier = self._tier_of(rid)
        if tier is None:
            return self._route_best_effort(rid, now_us)
        evidence = [] if (self.record_decisions or self.audit) else None

        def scan(ts: TierState):
            best = None
            best_key = None
            for s in ts.servers:
                if s.pending:
                    continue
                ok, pred, wait, reason = decode_feasible(
                    s, cand_kv, cand_rem, deadline, now_us, model,
                    tier_tpot_us=ts.tpot_us, relax_deadline=relax)
                if self.audit:
                    ok2, pred2, _, _ = decode_feasible(
                        s, cand_kv, cand_rem, deadline, now_us, model,
                        tier_tpot_us=ts.tpot_us, relax_deadline=relax, exact=True)
                    self.audit_checked += 1
                    if ok2 != ok or (ok and pred2 != pred):
                        self.audit_mismatches += 1
                if evidence is not None:
                    evidence.append((s.id, ok, pred, s.ordinal, reason))
                if ok:
                    key = (pred, -s.ordinal)  # max load, then lowest ordinal
                    if best is None or key > best_key:
                        best, best_key = (s, pred, wait), key
            return best

        got = scan(tier)
        if got:
            s, pred, wait = got
            return RoutingDecision(Outcome.ASSIGN, s.id, tier.id, pred, wait,
                                   evidence)
        if self.pool:
            s = self._acquire(tier, now_us, Role.DECODE)
            ok, pred, wait, _ = decode_feasible(
                s, cand_kv, cand_rem, deadline, now_us, model,
                tier_tpot_us=tier.tpot_us, relax_deadline=True)
            return RoutingDecision(Outcome.SCALE_UP_THEN_ASSIGN, s.id, tier.id,
                                   pred, wait, evidence)
        # Lazy promotion: strictly tighter tiers, loosest-tighter first.
        scanned = [tier.id]
        idx = self.tier_order.index(tier.id)
        quotas = self.tier_quotas()
        for tid in reversed(self.tier_order[:idx]):
            scanned.append(tid)
            target = self.tiers[tid]
            # Promote only into tiers with genuinely spare capacity (above
            # fair share, no backlog) so guests cannot crowd out the
            # tier's own arrivals.
            if target.queue or len(target.servers) <= quotas[tid] + 0.5:
                continue
            got = scan(target)
            if got:
                s, pred, wait = got
                return RoutingDecision(Outcome.PROMOTE, s.id, tid, pred, wait,
                                       evidence)
        return RoutingDecision(Outcome.QUEUE, None, tier.id, None, None,
                               evidence, time_sensitive=False,
                               scanned_tiers=tuple(scanned))

    def _route_best_effort(self, rid: int, now_us: int) -> RoutingDecision:
        """Best-effort requests run on pool servers, memory-only admission."""
        t = self.table
        gen = int(t.gen[rid])
        cand_kv = int(t.p[rid]) + gen
        cand_rem = max(1, self.cfg.avg_decode_len - gen)
        best = None
        for s in self.pool:
            if s.peak_kv_with(cand_kv, cand_rem) <= self.cap_eff:
                load = s.n_decode()
                if best is None or load < best[1] or (load == best[1] and s.id < best[0].id):
                    best = (s, load)
        if best:
            return RoutingDecision(Outcome.ASSIGN, best[0].id, BEST_EFFORT_TIER_ID,
                                   None, best[0].wait_us(now_us))
        return RoutingDecision(Outcome.QUEUE, None, BEST_EFFORT_TIER_ID,
                               time_sensitive=False)

    # -- CO routing -----------------------------------------------------------

    def _co_budget(self, tier_id: int) -> int:
        if self.cfg.co_tier_budgets and tier_id in self.cfg.co_tier_budgets:
            return self.cfg.co_tier_budgets[tier_id]
        return self.cfg.token_budget

    def route_co_polyserve(self, rid: int, now_us: int) -> RoutingDecision:
        """Tiered co-located routing via the chunked-prefill predictor."""
        t = self.table
        model = self.model
        p = int(t.p[rid])
        deadline = int(t.arr[rid] + t.ttft[rid])
        tpot = int(t.tpot[rid])
        relax = deadline <= now_us
        tier = self._tier_of(rid)
        if tier is None:
            return self._route_best_effort_co(rid, now_us)
        evidence = [] if (self.record_decisions or self.audit) else None

        saw_resident = [False]

        def scan(ts: TierState):
            budget = self._co_budget(ts.id)
            best = None
            best_key = None
            for s in ts.servers:
                if s.pending:
                    continue
                ok, c, pred, wait, reason = admit_co(
                    s, p, deadline, tpot, now_us, model, budget,
                    tier_tpot_us=ts.tpot_us, relax_deadline=relax)
                if reason == "resident":
                    # The veto lapses once the resident is past saving, so
                    # this outcome can flip with time alone.
                    saw_resident[0] = True
                if self.audit:
                    ok2, _, pred2, _, _ = admit_co(
                        s, p, deadline, tpot, now_us, model, budget,
                        tier_tpot_us=ts.tpot_us, relax_deadline=relax, exact=True)
                    self.audit_checked += 1
                    if ok2 != ok or (ok and pred2 != pred):
                        self.audit_mismatches += 1
                if evidence is not None:
                    evidence.append((s.id, ok, pred, s.ordinal, reason))
                if ok:
                    key = (pred, -s.ordinal)
                    if best is None or key > best_key:
                        best, best_key = (s, c, pred, wait), key
            return best

        got = scan(tier)
        if got:
            s, c, pred, wait = got
            return RoutingDecision(Outcome.ASSIGN, s.id, tier.id, pred, wait,
                                   evidence)
        if self.pool:
            s = self._acquire(tier, now_us, Role.COLOCATED)
            return RoutingDecision(Outcome.SCALE_UP_THEN_ASSIGN, s.id, tier.id,
                                   None, 0, evidence)
        scanned = [tier.id]
        idx = self.tier_order.index(tier.id)
        quotas = self.tier_quotas()
        for tid in reversed(self.tier_order[:idx]):
            scanned.append(tid)
            target = self.tiers[tid]
            # Promote only into tiers with genuinely spare capacity (above
            # fair share, no backlog) so guests cannot crowd out the
            # tier's own arrivals.
            if target.queue or len(target.servers) <= quotas[tid] + 0.5:
                continue
            got = scan(target)
            if got:
                s, c, pred, wait = got
                return RoutingDecision(Outcome.PROMOTE, s.id, tid, pred, wait,
                                       evidence)
        return RoutingDecision(Outcome.QUEUE, None, tier.id, None, None,
                               evidence, time_sensitive=saw_resident[0],
                               scanned_tiers=tuple(scanned))

    def _route_best_effort_co(self, rid: int, now_us: int) -> RoutingDecision:
        t = self.table
        p = int(t.p[rid])
        avg_d = self.cfg.avg_decode_len
        best = None
        for s in self.pool:
            if s.peak_kv_with(p, avg_d) <= self.cap_eff:
                load = s.n_decode() + len(s.prefill_jobs)
                if best is None or load < best[1] or (load == best[1] and s.id < best[0].id):
                    best = (s, load)
        if best:
            return RoutingDecision(Outcome.ASSIGN, best[0].id, BEST_EFFORT_TIER_ID)
        return RoutingDecision(Outcome.QUEUE, None, BEST_EFFORT_TIER_ID,
                               time_sensitive=False)

    # -- PD prefill routing ----------------------------------------------------

    def route_prefill_pd(self, rid: int, now_us: int) -> RoutingDecision:
        """EDF prefill routing to the highest-load server still meeting TTFT."""
        t = self.table
        model = self.model
        p = int(t.p[rid])
        deadline = int(t.arr[rid] + t.ttft[rid]) - self.cfg.kv_transfer_latency_us
        budget = self.cfg.token_budget
        plan_us = sum(prefill_plan_times(model, p, budget))
        best = None       # argmax est among feasible
        fallback = None   # argmin est (deadline already lost)
        for s in self.prefill_servers:
            est = s.wait_us(now_us) + s.pending_work_us + plan_us
            if est <= deadline - now_us + 0 and now_us + est <= deadline:
                if best is None or est > best[1] or (est == best[1] and s.ordinal < best[0].ordinal):
                    best = (s, est)
            if fallback is None or est < fallback[1]:
                fallback = (s, est)
        if best:
            return RoutingDecision(Outcome.ASSIGN, best[0].id, None, None, best[1])
        if self.cfg.policy == "polyserve" and self.pool:
            s = self._acquire_prefill(now_us)
            return RoutingDecision(Outcome.SCALE_UP_THEN_ASSIGN, s.id, None,
                                   None, plan_us)
        if deadline <= now_us and fallback:
            # TTFT already lost: place it anyway so it completes (and counts
            # as violated) rather than starving the EDF queue.
            return RoutingDecision(Outcome.ASSIGN, fallback[0].id, None, None,
                                   fallback[1])
        return RoutingDecision(Outcome.QUEUE)

    # -- baselines ----------------------------------------------------------

    def route_baseline(self, rid: int, now_us: int) -> RoutingDecision:
        t = self.table
        cand_kv = int(t.p[rid] + t.gen[rid])
        policy = self.cfg.policy
        servers = self.flat_decode
        if policy == "random":
            order = self.rng.permutation(len(servers))
            for i in order:
                s = servers[int(i)]
                if s.kv_total + cand_kv <= self.cap_eff:
                    return RoutingDecision(Outcome.ASSIGN, s.id)
            return RoutingDecision(Outcome.QUEUE, time_sensitive=False)
        best = None
        best_key = None
        for s in servers:
            if s.kv_total + cand_kv > self.cap_eff:
                continue
            if policy == "minimal":
                chunk = s.next_chunk_tokens()
                batch = s.n_decode() + 1 + chunk
                key = (self.model.iteration_time(batch, s.kv_total + cand_kv, chunk),
                       s.id)
            else:  # chunk_static: FCFS to the least token-loaded server
                key = (s.n_decode() + s.next_chunk_tokens(), s.id)
            if best is None or key < best_key:
                best, best_key = s, key
        if best is not None:
            return RoutingDecision(Outcome.ASSIGN, best.id)
        return RoutingDecision(Outcome.QUEUE, time_sensitive=False)

    # -- fair-share quotas ------------------------------------------------------

    def note_arrival(self, rid: int) -> None:
        """Record one arrival for the fair-share statistics."""
        tid = int(self.table.tier[rid])
        if tid in self.tiers:
            self.tier_arrivals[tid] += 1
        self.arrival_p_sum += int(self.table.p[rid])
        self.arrival_count += 1

    def _pd_batch_limit(self, tpot_us: int) -> int:
        """Decode-batch a tier server sustains at its TPOT (mean request)."""
        cached = self._pd_bl_cache.get(tpot_us)
        if cached is not None:
            return cached
        kv_per = (self.arrival_p_sum / max(1, self.arrival_count)
                  + self.cfg.avg_decode_len / 2)
        lo, hi = 1, max(1, int(self.model.kv_capacity / kv_per))
        if self.model.iteration_time(1, int(kv_per)) > tpot_us:
            best = 1
        else:
            best = 1
            while lo <= hi:
                mid = (lo + hi) // 2
                if self.model.iteration_time(mid, int(mid * kv_per)) <= tpot_us:
                    best = mid
                    lo = mid + 1
                else:
                    hi = mid - 1
        self._pd_bl_cache[tpot_us] = best
        return best

    def note_outcome(self, tid: int, attained: bool) -> None:
        """Record one request outcome for the fairness feedback."""
        if tid in self.tiers:
            if attained:
                self.tier_ok_ewma[tid] += 1.0
            else:
                self.tier_miss_ewma[tid] += 1.0

    # Fairness feedback: servers shifted per unit of miss-rate difference,
    # and the largest shift a tier can gain or lose.
    QUOTA_MISS_GAIN = 8.0
    QUOTA_MISS_CAP = 2.0

    def tier_quotas(self) -> dict[int, float]:
        """Per-tier server shares.

        Base share: observed arrival mix weighted by the per-server service
        rate each tier sustains at its TPOT. On top, a feedback term moves
        share toward tiers missing their SLOs more often than the mix-
        weighted average, equalizing attainment across tiers under load.
        """
        n_total = sum(self.tier_arrivals.values())
        if self._quota_cache is None or n_total >= 2 * self._quota_at:
            self._pd_bl_cache.clear()
            weights: dict[int, float] = {}
            for tid, ts in self.tiers.items():
                n = self.tier_arrivals[tid]
                if n <= 0.0:
                    weights[tid] = 0.0
                elif self.cfg.architecture == "co":
                    weights[tid] = n * ts.tpot_us / self._co_budget(tid)
                else:
                    weights[tid] = (n * ts.tpot_us
                                    / self._pd_batch_limit(ts.tpot_us))
            self._quota_cache = weights
            self._quota_at = max(1, n_total)
        weights = self._quota_cache
        navail = len(self.servers) - len(self.prefill_servers)
        total = sum(weights.values())
        if total <= 0:
            return {tid: 0.0 for tid in self.tiers}
        quotas = {tid: w / total * navail for tid, w in weights.items()}
        rates: dict[int, float] = {}
        for tid in self.tiers:
            seen = self.tier_miss_ewma[tid] + self.tier_ok_ewma[tid]
            rates[tid] = self.tier_miss_ewma[tid] / seen if seen > 1.0 else 0.0
        mean_rate = sum(self.tier_arrivals[tid] * rates[tid]
                        for tid in self.tiers) / max(1, n_total)
        cap = self.QUOTA_MISS_CAP
        adjusted = {}
        for tid, q in quotas.items():
            adj = self.QUOTA_MISS_GAIN * (rates[tid] - mean_rate)
            adjusted[tid] = max(0.0, q + max(-cap, min(cap, adj)))
        scale = navail / max(1e-9, sum(adjusted.values()))
        return {tid: q * scale for tid, q in adjusted.items()}

    # -- autoscaling ----------------------------------------------------------

    def autoscale_tick(self, now_us: int) -> list[tuple[str, int, Optional[int]]]:
        """Periodic scale-down / pending-list / scale-up pass."""
        actions: list[tuple[str, int, Optional[int]]] = []
        if self.cfg.policy != "polyserve":
            return actions
        # Outcome statistics decay with roughly a five-second horizon so the
        # fairness feedback tracks the recent miss mix.
        decay = 1.0 - self.cfg.autoscale_period_us / 5_000_000
        for tid in self.tiers:
            self.tier_miss_ewma[tid] *= decay
            self.tier_ok_ewma[tid] *= decay
        self._quota_cache = None
        t = self.table
        for tid in self.tier_order:
            ts = self.tiers[tid]
            if not ts.servers:
                continue
            last = ts.servers[-1]
            if last.is_empty() and not last.busy:
                ts.servers.pop()
                self._release(last, now_us, "release")
                actions.append(("release", last.id, tid))
            else:
                home = any(int(t.tier[rid]) == tid
                           for rid in last.req_ids.tolist() + last.join_buf)
                if not home:
                    home = any(int(t.tier[j.rid]) == tid for j in last.prefill_jobs)
                if not home:
                    ts.servers.pop()
                    last.pending = True
                    self.pending_list.append(last)
                    self.scaling_events.append((now_us, "pending", last.id, tid))
                    actions.append(("pending", last.id, tid))
        # Pending-list servers: drain to pool, or rejoin the tier matching
        # their residents when that tier wants to scale up.
        for s in list(self.pending_list):
            if s.is_empty() and not s.busy:
                self.pending_list.remove(s)
                self._release(s, now_us, "drain")
                actions.append(("drain", s.id, None))
                continue
            rids = s.req_ids.tolist() + s.join_buf + [j.rid for j in s.prefill_jobs]
            tids = [int(t.tier[r]) for r in rids if int(t.tier[r]) != BEST_EFFORT_TIER_ID]
            if not tids:
                continue
            target = min((self.tiers[x] for x in set(tids) if x in self.tiers),
                         key=lambda z: z.tpot_us, default=None)
            if (target is not None and target.queue
                    and len(target.servers) <
                    self.tier_quotas()[target.id] + 0.5):
                self.pending_list.remove(s)
                s.pending = False
                s.tier_id = target.id
                s.tier_tpot_us = target.tpot_us
                s.ordinal = target.next_ordinal
                target.next_ordinal += 1
                target.servers.append(s)
                target.version += 1
                s._invalidate()
                self.scaling_events.append((now_us, "reassign", s.id, target.id))
                actions.append(("reassign", s.id, target.id))
        # Scale up tiers with pending work while the pool has servers;
        # tiers still under their fair share claim first, tightest first.
        quotas = self.tier_quotas()
        role = Role.COLOCATED if self.cfg.architecture == "co" else Role.DECODE
        for under_only in (True, False):
            for tid in self.tier_order:
                ts = self.tiers[tid]
                if not ts.queue or not self.pool:
                    continue
                if under_only and len(ts.servers) >= quotas[tid] + 0.5:
                    continue
                s = self._acquire(ts, now_us, role)
                actions.append(("scale_up", s.id, tid))
        # Overload rebalance toward fair shares: with the pool empty, a tier
        # under its share with waiting work drains one server from the
        # loosest tier running above its share; once empty it reaches the
        # pool, where the tightest queued tier claims it first.
        if not self.pool and len(self.pending_list) < 2:
            for tid in self.tier_order:
                ts = self.tiers[tid]
                if not ts.queue or len(ts.servers) >= quotas[tid] - 0.5:
                    continue
                for vid in reversed(self.tier_order):
                    vs = self.tiers[vid]
                    if (vid == tid or len(vs.servers) < 2
                            or len(vs.servers) <= quotas[vid] + 0.5):
                        continue
                    last = vs.servers.pop()
                    last.pending = True
                    self.pending_list.append(last)
                    self.scaling_events.append(
                        (now_us, "rebalance", last.id, vid))
                    actions.append(("rebalance", last.id, vid))
                    break
                break
        # Idle prefill servers terminate freely (last ordinal first).
        if self.cfg.architecture == "pd" and self.prefill_servers:
            last = self.prefill_servers[-1]
            if last.is_empty() and not last.busy and not self.prefill_queue:
                self.prefill_servers.pop()
                self._release(last, now_us, "release_prefill")
                actions.append(("release_prefill", last.id, None))
        return actions


def route_baseline(policy: str, cluster: Cluster, rid: int, now_us: int) -> RoutingDecision:
    """Baseline decode/co routing (random, minimal, chunk_static)."""
    if policy not in ("random", "minimal", "chunk_static"):
        raise ValueError(f"unknown baseline policy {policy!r}")
    assert cluster.cfg.policy == policy
    return cluster.route_baseline(rid, now_us)
