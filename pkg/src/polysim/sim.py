"""Discrete-event cluster simulator.

Drives the routing logic in ``scheduler`` over a request stream. Engine
iterations run on an exact integer-microsecond clock and chain
back-to-back; arrivals, queue retries and autoscaling happen on a 1 ms
tick. Request state lives in a struct-of-arrays table so per-iteration
token commits are vectorized.
"""

from __future__ import annotations

import heapq
import json
from bisect import insort
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np

from .scheduler import (BEST_EFFORT_TIER_ID, Cluster, Outcome, PrefillJob,
                        Role, SchedulerConfig, Server, dynamic_chunk_plan,
                        prefill_plan_times)
from .workload import TICK_US, Request, SloTier, default_tiers

WARMUP_FRACTION = 0.05


class InvariantError(RuntimeError):
    """A hard simulator invariant was violated."""


class RequestTable:
    """Struct-of-arrays request state."""

    def __init__(self, requests: Sequence[Request]):
        n = len(requests)
        self.n = n
        self.arr = np.asarray([r.arrival_us for r in requests], dtype=np.int64)
        self.ttft = np.asarray([r.ttft_us for r in requests], dtype=np.int64)
        self.tpot = np.asarray([r.tpot_us for r in requests], dtype=np.int64)
        self.p = np.asarray([r.p for r in requests], dtype=np.int64)
        self.d = np.asarray([r.d_true for r in requests], dtype=np.int64)
        self.tier = np.asarray([r.tier_id for r in requests], dtype=np.int64)
        self.gen = np.zeros(n, dtype=np.int64)
        self.viol = np.zeros(n, dtype=bool)
        self.first_emit = np.full(n, -1, dtype=np.int64)
        self.done_t = np.full(n, -1, dtype=np.int64)

    def __len__(self) -> int:
        return self.n


def goodput_at(sweep: Sequence[tuple[float, float, float]], threshold: float,
               interpolate: bool = True) -> float:
    """Largest rate whose attainment meets ``threshold``.

    ``sweep`` holds (rate, attainment, goodput) rows sorted by rate. With
    interpolation the crossing point between the last qualifying rate and
    its successor is returned; 0 if no rate qualifies.
    """
    if not sweep:
        return 0.0
    best_i = None
    for i, (_, att, _) in enumerate(sweep):
        if att >= threshold:
            best_i = i
    if best_i is None:
        return 0.0
    r0, a0, _ = sweep[best_i]
    if not interpolate or best_i + 1 >= len(sweep):
        return float(r0)
    r1, a1, _ = sweep[best_i + 1]
    if a1 >= threshold or a0 == a1:
        return float(r0)
    return float(r0 + (r1 - r0) * (a0 - threshold) / (a0 - a1))


def cost_metrics(metrics: "RunMetrics") -> float:
    """Instance-microseconds of assigned server time per attained request."""
    if metrics.attained == 0:
        return float("inf")
    return metrics.cost_instance_us / metrics.attained


def dslo_attained(table: RequestTable, measure_from: int = 0) -> np.ndarray:
    """Boolean mask: completed with every token on its staggered deadline."""
    ok = (table.done_t >= 0) & ~table.viol
    if measure_from:
        ok = ok.copy()
        ok[:measure_from] = False
    return ok


def check_token_deadlines(arrival_us: int, ttft_us: int, tpot_us: int,
                          emit_us: Sequence[int]) -> bool:
    """True when token i of an emission trace lands by arrival + ttft + i*tpot."""
    e = np.asarray(emit_us, dtype=np.int64)
    if len(e) == 0:
        return True
    i = np.arange(len(e), dtype=np.int64)
    return bool((e <= arrival_us + ttft_us + i * tpot_us).all())


@dataclass
class SimConfig:
    sched: SchedulerConfig = field(default_factory=SchedulerConfig)
    n_servers: int = 8
    seed: int = 0
    tiers: Optional[tuple[SloTier, ...]] = None
    record_tokens: bool = False
    record_decisions: bool = False
    audit: bool = False
    max_time_us: int = 7_200_000_000  # 2 simulated hours

    def __post_init__(self) -> None:
        if self.n_servers < 1:
            raise ValueError("need at least one server")


@dataclass
class RunMetrics:
    n: int
    completed: int
    attained: int
    attainment: float
    goodput_rps: float
    cost_instance_us: int
    cost_per_req_us: float
    duration_us: int
    tokens_emitted: int
    per_tier_attainment: dict
    scaling_events: int
    audit_checked: int = 0
    audit_mismatches: int = 0
    timed_out: bool = False


class ClusterSim:
    """One simulation run of a request stream over a server cluster."""

    def __init__(self, requests: Sequence[Request], model, cfg: SimConfig):
        self.model = model
        self.cfg = cfg
        tiers = cfg.tiers if cfg.tiers is not None else default_tiers()
        self.table = RequestTable(requests)
        self.cluster = Cluster(cfg.n_servers, tiers, cfg.sched, model,
                               seed=cfg.seed,
                               record_decisions=cfg.record_decisions,
                               audit=cfg.audit)
        self.cluster.table = self.table
        order = np.argsort(self.table.arr, kind="stable")
        self._arr_order = order
        self._arr_i = 0
        self.pending_decode: list[tuple[int, int]] = []  # (ready_us, rid)
        self.flat_queue: list[tuple[int, int, int]] = []  # baselines
        self.completed = 0
        self.tokens_emitted = 0
        self.token_rows: list[tuple[int, int, int]] = []
        self._seq = 0
        self.timed_out = False
        self.now = 0
        # Per-queue retry memo: a queue whose head failed for reasons that
        # only a state change can fix is not rescanned until the relevant
        # version counters move.
        self._retry_skip: dict = {}
        self._last_queue_ts = True
        self._last_queue_scan = None
        # Event bookkeeping for the main loop: a min-heap of iteration ends
        # (entries go stale when a server idles; validated on pop) and the
        # servers stalled with zero-token batches awaiting room.
        self._busy_heap: list[tuple[int, int]] = []
        self._stalled: list[int] = []
        self._dl_base = self.table.arr + self.table.ttft
        # Each request feeds the scheduler's fairness statistics once: at
        # its first missed deadline or at an on-time completion.
        self._miss_counted = np.zeros(self.table.n, dtype=bool)
        self.binning_checked = 0

    # -- placement ---------------------------------------------------------

    def _place_decode(self, s: Server, rid: int, now: int) -> None:
        t = self.table
        s.join_buf.append(int(rid))
        s.kv_total += int(t.p[rid] + t.gen[rid])
        s._invalidate()
        if not s.busy:
            self._start_iteration(s, now)

    def _place_co(self, s: Server, rid: int, now: int, budget: int) -> bool:
        t = self.table
        p = int(t.p[rid])
        c = budget - s.n_decode() - s.next_chunk_tokens()
        if c < 1:
            return False
        n_chunks = -(-p // c)
        chunks = [c] * (n_chunks - 1) + [p - (n_chunks - 1) * c]
        job = PrefillJob(int(rid), p, chunks,
                         int(t.arr[rid] + t.ttft[rid]), chunk_size=c)
        s.prefill_jobs.append(job)
        s._invalidate()
        if not s.busy:
            self._start_iteration(s, now)
        return True

    def _place_prefill(self, s: Server, rid: int, now: int) -> None:
        t = self.table
        p = int(t.p[rid])
        budget = self.cfg.sched.token_budget
        job = PrefillJob(int(rid), p, dynamic_chunk_plan(p, budget),
                         int(t.arr[rid] + t.ttft[rid]))
        job.iter_times_us = prefill_plan_times(self.model, p, budget)
        insort(s.prefill_jobs, job, key=lambda j: j.deadline_us)
        s.pending_work_us += sum(job.iter_times_us)
        s._invalidate()
        if not s.busy:
            self._start_iteration(s, now)

    # -- submission / routing ------------------------------------------------

    def _queue_key(self, rid: int, deadline: int) -> tuple[int, int, int]:
        self._seq += 1
        return (deadline, self._seq, int(rid))

    def _submit(self, rid: int, now: int) -> None:
        cl = self.cluster
        cfg = self.cfg.sched
        cl.note_arrival(rid)
        if cfg.policy == "polyserve":
            if cfg.architecture == "pd":
                self._try_prefill(rid, now)
            else:
                self._try_co(rid, now)
        else:
            if cfg.architecture == "pd":
                self._try_prefill(rid, now)
            else:
                self._try_flat(rid, now)

    def _try_prefill(self, rid: int, now: int) -> bool:
        cl = self.cluster
        dec = cl.route_prefill_pd(rid, now)
        if dec.outcome in (Outcome.ASSIGN, Outcome.SCALE_UP_THEN_ASSIGN):
            self._place_prefill(cl.servers[dec.server_id], rid, now)
            return True
        t = self.table
        heapq.heappush(cl.prefill_queue,
                       self._queue_key(rid, int(t.arr[rid] + t.ttft[rid])))
        return False

    def _hopeless(self, rid: int, deadline: int, now: int) -> bool:
        """Can this request no longer attain its SLO?

        Hopeless requests (deadline already passed, or an earlier token was
        late) are permanent goodput losses, so they run best-effort on spare
        capacity; under overload the deadline-ordered tier queues would
        otherwise serve them first and starve arrivals that can still make
        their deadlines.
        """
        t = self.table
        if int(t.tier[rid]) == BEST_EFFORT_TIER_ID:
            return False
        return deadline <= now or bool(t.viol[rid])

    def _try_co(self, rid: int, now: int, key=None, from_be: bool = False) -> bool:
        cl = self.cluster
        t = self.table
        deadline = int(t.arr[rid] + t.ttft[rid])
        hopeless = self._hopeless(rid, deadline, now)
        if hopeless:
            if not self._miss_counted[rid]:
                self._miss_counted[rid] = True
                cl.note_outcome(int(t.tier[rid]), False)
            dec = cl._route_best_effort_co(rid, now)
        else:
            dec = cl.route_co_polyserve(rid, now)
        if cl.record_decisions:
            cl.decisions.append((now, rid, dec))
        if dec.outcome in (Outcome.ASSIGN, Outcome.SCALE_UP_THEN_ASSIGN,
                           Outcome.PROMOTE):
            s = cl.servers[dec.server_id]
            budget = cl._co_budget(dec.tier_id) \
                if dec.tier_id != BEST_EFFORT_TIER_ID else cl.cfg.token_budget
            if self._place_co(s, rid, now, budget):
                return True
        tid = int(t.tier[rid])
        if key is None:
            key = self._queue_key(rid, deadline)
        self._last_queue_ts = (dec.time_sensitive
                               if dec.outcome is Outcome.QUEUE else False)
        self._last_queue_scan = dec.scanned_tiers
        if tid == BEST_EFFORT_TIER_ID or hopeless:
            heapq.heappush(cl.be_queue, key)
            # A tier-queue head that went hopeless left its tier queue for
            # the best-effort one; tell the tier drain to keep going.
            return hopeless and not from_be
        heapq.heappush(cl.tiers[tid].queue, key)
        return False

    def _try_decode(self, rid: int, now: int, key=None,
                    from_be: bool = False) -> bool:
        """PD decode-phase routing after the KV handoff."""
        cl = self.cluster
        t = self.table
        poly = self.cfg.sched.policy == "polyserve"
        gen = int(t.gen[rid])
        deadline = int(t.arr[rid] + t.ttft[rid] + (gen + 1) * t.tpot[rid])
        hopeless = poly and self._hopeless(rid, deadline, now)
        if hopeless:
            if not self._miss_counted[rid]:
                self._miss_counted[rid] = True
                cl.note_outcome(int(t.tier[rid]), False)
            dec = cl._route_best_effort(rid, now)
            if cl.record_decisions:
                cl.decisions.append((now, rid, dec))
        elif poly:
            dec = cl.route_decode_polyserve(rid, now)
            if cl.record_decisions:
                cl.decisions.append((now, rid, dec))
        else:
            dec = cl.route_baseline(rid, now)
        if dec.outcome in (Outcome.ASSIGN, Outcome.SCALE_UP_THEN_ASSIGN,
                           Outcome.PROMOTE):
            self._place_decode(cl.servers[dec.server_id], rid, now)
            return True
        if key is None:
            key = self._queue_key(rid, deadline)
        self._last_queue_ts = dec.time_sensitive
        self._last_queue_scan = dec.scanned_tiers
        if not poly:
            heapq.heappush(self.flat_queue, key)
            return False
        tid = int(t.tier[rid])
        if tid == BEST_EFFORT_TIER_ID or hopeless:
            heapq.heappush(cl.be_queue, key)
            return hopeless and not from_be
        heapq.heappush(cl.tiers[tid].queue, key)
        return False

    def _try_flat(self, rid: int, now: int, key=None) -> bool:
        """Baseline co-located submission."""
        cl = self.cluster
        dec = cl.route_baseline(rid, now)
        if dec.outcome is Outcome.ASSIGN:
            s = cl.servers[dec.server_id]
            if self._place_co(s, rid, now, self.cfg.sched.token_budget):
                return True
        self._last_queue_ts = (dec.time_sensitive
                               if dec.outcome is Outcome.QUEUE else False)
        self._last_queue_scan = None
        if key is None:
            key = self._queue_key(rid, int(self.table.arr[rid]))
        heapq.heappush(self.flat_queue, key)
        return False

    # -- engine iterations -----------------------------------------------------

    def _start_iteration(self, s: Server, t_us: int) -> bool:
        table = self.table
        cap = self.model.kv_capacity
        if s.join_buf:
            s.req_ids = np.concatenate(
                [s.req_ids, np.asarray(s.join_buf, dtype=np.int64)])
            s.join_buf.clear()
            s._invalidate()
        n_dec = len(s.req_ids)
        room = cap - s.kv_total
        grow_n = min(n_dec, room)
        grow_ids = s.req_ids[:grow_n]
        room -= grow_n
        commits: list[tuple[PrefillJob, int]] = []
        chunk_total = 0
        if s.prefill_jobs:
            jobs = s.prefill_jobs[:1] if s.role is Role.PREFILL else s.prefill_jobs
            for job in jobs:
                c = min(job.next_chunk(), room)
                if c > 0:
                    commits.append((job, c))
                    chunk_total += c
                    room -= c
        if n_dec > 0 and grow_n == 0 and chunk_total == 0:
            # KV is exactly full. Drain residents whose next token is their
            # last (their KV frees in the same commit); anything else is a
            # genuine deadlock.
            last = s.req_ids[table.gen[s.req_ids] + 1 >= table.d[s.req_ids]]
            if len(last) == 0:
                raise InvariantError(
                    f"server {s.id}: KV full with no completable resident")
            grow_ids = last
        batch = len(grow_ids) + chunk_total
        if batch == 0:
            s.busy = False
            self._stalled.append(s.id)
            return False
        kv_after = s.kv_total + len(grow_ids) + chunk_total
        dur = self.model.iteration_time(batch, kv_after, chunk_total)
        s.busy = True
        s.iter_start_us = t_us
        s.iter_end_us = t_us + dur
        s.grow_ids = grow_ids
        s.chunk_commits = commits
        heapq.heappush(self._busy_heap, (s.iter_end_us, s.id))
        return True

    def _commit(self, s: Server, e: int) -> None:
        table = self.table
        freed = False
        ids = s.grow_ids
        if len(ids):
            gen = table.gen[ids] + 1
            table.gen[ids] = gen
            dl = self._dl_base[ids] + gen * table.tpot[ids]
            late = e > dl
            table.viol[ids] = table.viol[ids] | late
            if late.any():
                new_miss = ids[late & ~self._miss_counted[ids]]
                if len(new_miss):
                    self._miss_counted[new_miss] = True
                    note = self.cluster.note_outcome
                    for tid in table.tier[new_miss].tolist():
                        note(tid, False)
            s.kv_total += len(ids)
            self.tokens_emitted += len(ids)
            if self.cfg.record_tokens:
                self.token_rows.extend(
                    zip(ids.tolist(), gen.tolist(), [e] * len(ids)))
            done_mask = gen >= table.d[ids]
            if done_mask.any():
                done = ids[done_mask]
                table.done_t[done] = e
                ok_done = done[~table.viol[done]]
                if len(ok_done):
                    note = self.cluster.note_outcome
                    for tid in table.tier[ok_done].tolist():
                        note(tid, True)
                s.kv_total -= int((table.p[done] + table.d[done]).sum())
                self.completed += len(done)
                keep = ~np.isin(s.req_ids, done, assume_unique=True)
                s.req_ids = s.req_ids[keep]
                freed = True
            s._invalidate()
        if s.chunk_commits:
            for job, c in s.chunk_commits:
                planned = job.chunks[job.ci]
                job.chunks[job.ci] = planned - c
                job.kv_done += c
                s.kv_total += c
                if job.chunks[job.ci] == 0:
                    if s.role is Role.PREFILL and job.ci < len(job.iter_times_us):
                        s.pending_work_us -= job.iter_times_us[job.ci]
                    job.ci += 1
                    # A chunk boundary can free token-budget room and always
                    # shortens this prefill's remaining-iteration count,
                    # which admission checks against resident deadlines.
                    freed = True
                else:
                    freed = True
                if job.kv_done >= job.p:
                    self._finish_prefill(s, job, e)
            s.chunk_commits = []
            s._invalidate()
        if s.kv_total > self.model.kv_capacity:
            raise InvariantError(
                f"server {s.id}: kv {s.kv_total} over capacity at {e}")
        if self.cfg.audit and s.tier_id is not None and s.tier_id >= 0 \
                and len(s.req_ids):
            # Tier binning: a server only hosts requests at or looser than
            # its tier's TPOT (promotion moves loose guests to tight tiers,
            # never the reverse).
            t_tpot = self.cluster.tiers[s.tier_id].tpot_us
            hosted = s.req_ids
            # Best-effort requests and already-missed ones (served on a
            # best-effort basis wherever room exists) are exempt.
            hosted = hosted[(table.tier[hosted] >= 0)
                            & ~self._miss_counted[hosted]]
            self.binning_checked += len(hosted)
            if (table.tpot[hosted] < t_tpot).any():
                raise InvariantError(
                    f"server {s.id}: tighter request on tier {s.tier_id}")
        if freed:
            # Queued admissions can only turn feasible when a resident
            # completes or a prefill crosses a chunk boundary; plain decode
            # commits grow KV and never help, so they leave the retry
            # versions alone.
            cl = self.cluster
            cl.version += 1
            if s.tier_id is not None:
                cl.tiers[s.tier_id].version += 1

    def _finish_prefill(self, s: Server, job: PrefillJob, e: int) -> None:
        table = self.table
        rid = job.rid
        table.first_emit[rid] = e
        table.viol[rid] = table.viol[rid] | (e > table.arr[rid] + table.ttft[rid])
        if table.viol[rid] and not self._miss_counted[rid]:
            self._miss_counted[rid] = True
            self.cluster.note_outcome(int(table.tier[rid]), False)
        self.tokens_emitted += 1
        if self.cfg.record_tokens:
            self.token_rows.append((rid, 0, e))
        s.prefill_jobs.remove(job)
        if s.role is Role.PREFILL:
            s.kv_total -= job.p
            ready = e + self.cfg.sched.kv_transfer_latency_us
            self.pending_decode.append((ready, rid))
        else:
            s.join_buf.append(rid)

    def _advance(self, now: int) -> None:
        h = self._busy_heap
        servers = self.cluster.servers
        while h and h[0][0] <= now:
            e, sid = heapq.heappop(h)
            s = servers[sid]
            if not s.busy or s.iter_end_us != e:
                continue
            self._commit(s, e)
            self._start_iteration(s, e)

    # -- tick actions -----------------------------------------------------------

    def _deliver(self, now: int) -> None:
        table = self.table
        order = self._arr_order
        while self._arr_i < len(order) and table.arr[order[self._arr_i]] <= now:
            self._submit(int(order[self._arr_i]), now)
            self._arr_i += 1

    def _route_ready_decode(self, now: int) -> None:
        if not self.pending_decode:
            return
        left = []
        for ready, rid in self.pending_decode:
            if ready <= now:
                self._try_decode(rid, now)
            else:
                left.append((ready, rid))
        self.pending_decode = left

    def _scan_versions(self, scanned) -> tuple:
        """Version counters the named scan depends on (None = global)."""
        cl = self.cluster
        if scanned is None:
            return (tuple(cl.tiers[t].version for t in cl.tier_order),
                    cl.pool_version, cl.version)
        return (tuple(cl.tiers[t].version for t in scanned), cl.pool_version)

    def _drain_queue(self, q: list, key, attempt, now: int) -> None:
        """Deadline-ordered retry with stop-at-first-failure.

        A queue whose head previously failed on state-dependent conditions
        (TPOT, memory, chunk room) is skipped until a version counter of a
        tier it scanned (or the pool) moves, or the head's relax status
        changes; wait-dependent failures retry every tick.
        """
        if not q:
            return
        head = q[0]
        memo = self._retry_skip.get(key)
        if memo is not None:
            m_head, m_scan, m_vers, m_relax = memo
            if (m_head == head and m_relax == (head[0] <= now)
                    and m_vers == self._scan_versions(m_scan)):
                return
        while q:
            item = heapq.heappop(q)
            if attempt(item[2], now, key=item):
                continue
            if self._last_queue_ts:
                self._retry_skip.pop(key, None)
            else:
                scan = self._last_queue_scan
                self._retry_skip[key] = (q[0], scan,
                                         self._scan_versions(scan),
                                         q[0][0] <= now)
            return
        self._retry_skip.pop(key, None)

    def _retry_queues(self, now: int) -> None:
        cl = self.cluster
        cfg = self.cfg.sched
        if cl.prefill_queue:
            _, _, rid = heapq.heappop(cl.prefill_queue)
            self._try_prefill(rid, now)
        if cfg.policy == "polyserve":
            attempt = (self._try_decode if cfg.architecture == "pd"
                       else self._try_co)
            for tid in cl.tier_order:
                self._drain_queue(cl.tiers[tid].queue, ("tier", tid),
                                  attempt, now)
            self._drain_queue(cl.be_queue, ("be",),
                              partial(attempt, from_be=True), now)
        else:
            attempt = (self._try_decode if cfg.architecture == "pd"
                       else self._try_flat)
            self._drain_queue(self.flat_queue, ("flat",), attempt, now)

    # -- main loop -----------------------------------------------------------

    def _next_tick(self, now: int) -> Optional[int]:
        cl = self.cluster
        nxt = None
        if self._arr_i < len(self._arr_order):
            nxt = int(self.table.arr[self._arr_order[self._arr_i]])
        h = self._busy_heap
        servers = cl.servers
        while h:
            e, sid = h[0]
            s = servers[sid]
            if s.busy and s.iter_end_us == e:
                t = -(-e // TICK_US) * TICK_US
                if nxt is None or t < nxt:
                    nxt = t
                break
            heapq.heappop(h)
        for ready, _ in self.pending_decode:
            t = -(-ready // TICK_US) * TICK_US
            if nxt is None or t < nxt:
                nxt = t
        queued = (cl.prefill_queue or cl.be_queue or self.flat_queue
                  or any(ts.queue for ts in cl.tiers.values()))
        if queued:
            t = now + TICK_US
            if nxt is None or t < nxt:
                nxt = t
        elif cl.cfg.policy == "polyserve" and (
                cl.pending_list or cl.prefill_servers
                or any(ts.servers for ts in cl.tiers.values())):
            period = cl.cfg.autoscale_period_us
            t = (now // period + 1) * period
            if nxt is None or t < nxt:
                nxt = t
        if nxt is not None and nxt <= now:
            nxt = now + TICK_US
        return nxt

    def run(self) -> RunMetrics:
        cl = self.cluster
        period = self.cfg.sched.autoscale_period_us
        now = 0
        max_t = self.cfg.max_time_us
        n = len(self.table)
        while True:
            self._advance(now)
            self._deliver(now)
            self._route_ready_decode(now)
            self._retry_queues(now)
            if now % period == 0:
                cl.autoscale_tick(now)
            if self._stalled:
                retry, self._stalled = self._stalled, []
                for sid in retry:
                    s = cl.servers[sid]
                    if not s.busy and not s.is_empty():
                        self._start_iteration(s, now)
            if self.completed >= n:
                break
            nxt = self._next_tick(now)
            if nxt is None:
                break
            if nxt > max_t:
                self.timed_out = True
                break
            now = nxt
        self.now = now
        # Flush assigned time.
        end = max(now, int(self.table.done_t.max()) if n else now)
        for s in cl.servers:
            if s.assigned_since_us is not None:
                s.assigned_us += end - s.assigned_since_us
                s.assigned_since_us = None
        return self._metrics(end)

    # -- metrics -----------------------------------------------------------

    def _metrics(self, end_us: int) -> RunMetrics:
        table = self.table
        n = len(table)
        measure_from = int(WARMUP_FRACTION * n)
        ok = dslo_attained(table)
        ok_meas = ok[measure_from:]
        n_meas = n - measure_from
        attained = int(ok_meas.sum())
        # Vacuous attainment for an empty measurement window.
        attainment = attained / n_meas if n_meas else 1.0
        arrs = table.arr[measure_from:]
        window_us = int(arrs.max() - arrs.min()) if len(arrs) > 1 else end_us
        window_us = max(window_us, 1)
        goodput = attained / (window_us / 1e6)
        cost = sum(s.assigned_us for s in self.cluster.servers)
        per_tier: dict[int, float] = {}
        tiers_meas = table.tier[measure_from:]
        for tid in sorted(set(tiers_meas.tolist())):
            mask = tiers_meas == tid
            per_tier[int(tid)] = float(ok_meas[mask].mean()) if mask.any() else 1.0
        return RunMetrics(
            n=n, completed=self.completed, attained=attained,
            attainment=attainment, goodput_rps=goodput,
            cost_instance_us=int(cost),
            cost_per_req_us=cost / attained if attained else float("inf"),
            duration_us=end_us, tokens_emitted=self.tokens_emitted,
            per_tier_attainment=per_tier,
            scaling_events=len(self.cluster.scaling_events),
            audit_checked=self.cluster.audit_checked,
            audit_mismatches=self.cluster.audit_mismatches,
            timed_out=self.timed_out,
        )

    # -- dumps -----------------------------------------------------------------

    def dump_tokens(self, out) -> None:
        out.write("request_id,i,emit_us\n")
        for rid, i, e in sorted(self.token_rows):
            out.write(f"{rid},{i},{e}\n")

    def dump_metrics(self, m: RunMetrics, out) -> None:
        json.dump({
            "requests": m.n, "completed": m.completed,
            "attained": m.attained, "attainment": m.attainment,
            "goodput_rps": m.goodput_rps,
            "cost_instance_us": m.cost_instance_us,
            "cost_per_req_us": m.cost_per_req_us,
            "duration_us": m.duration_us,
            "tokens_emitted": m.tokens_emitted,
            "per_tier_attainment": {str(k): v for k, v in
                                    m.per_tier_attainment.items()},
            "scaling_events": m.scaling_events,
            "timed_out": m.timed_out,
        }, out, indent=2)
        out.write("\n")


def run_sim(requests: Sequence[Request], model, cfg: SimConfig) -> RunMetrics:
    return ClusterSim(requests, model, cfg).run()
