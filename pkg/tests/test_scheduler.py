"""Routing and admission logic: chunk planning, peak-KV prediction,
fast-path/reference agreement, tiered routing and the autoscaler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polysim.bench import build_bench_cluster
from polysim.perf_model import default_model
from polysim.scheduler import (Cluster, Outcome, PrefillJob, Role,
                               SchedulerConfig, admit_co, decode_feasible,
                               dynamic_chunk_plan, predict_peak_kv,
                               prefill_plan_times)
from polysim.sim import RequestTable
from polysim.workload import Request, default_tiers

MODEL = default_model()


# -- dynamic chunking --------------------------------------------------------


def test_chunk_plan_sums_and_sizes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = int(rng.integers(1, 10_000))
        b = int(rng.integers(1, 2049))
        plan = dynamic_chunk_plan(p, b)
        assert sum(plan) == p
        assert all(c == b for c in plan[:-1])
        assert 1 <= plan[-1] < 2 * b


def test_chunk_plan_merges_the_tail():
    # 2050 tokens at a 1024 budget: two iterations, not three.
    assert dynamic_chunk_plan(2050, 1024) == [1024, 1026]
    assert dynamic_chunk_plan(2048, 1024) == [1024, 1024]
    assert dynamic_chunk_plan(500, 1024) == [500]


def test_chunk_plan_validation():
    with pytest.raises(ValueError):
        dynamic_chunk_plan(0, 10)
    with pytest.raises(ValueError):
        dynamic_chunk_plan(10, 0)


def test_prefill_plan_times_tracks_chunks():
    times = prefill_plan_times(MODEL, 2050, 1024)
    assert len(times) == 2
    assert times[0] == MODEL.iteration_time(1024, 1024, 1024)
    assert times[1] == MODEL.iteration_time(1026, 2050, 1026)


# -- peak-KV prediction ------------------------------------------------------


def brute_force_peak(residents, cand_kv, cand_rem):
    """Step the whole batch token by token and track the KV total."""
    items = list(residents) + [(cand_kv, cand_rem)]
    horizon = max(r for _, r in items)
    peak = 0
    for t in range(1, horizon + 1):
        total = sum(kv + t for kv, r in items if r >= t)
        peak = max(peak, total)
    return peak


def test_predict_peak_kv_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(0, 12))
        residents = [(int(rng.integers(0, 2000)), int(rng.integers(1, 60)))
                     for _ in range(n)]
        kv, rem = int(rng.integers(0, 2000)), int(rng.integers(1, 60))
        assert predict_peak_kv(residents, kv, rem) == \
            brute_force_peak(residents, kv, rem)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 500), st.integers(1, 40)),
                max_size=8),
       st.integers(0, 500), st.integers(1, 40))
def test_peak_kv_property(residents, kv, rem):
    assert predict_peak_kv(residents, kv, rem) == \
        brute_force_peak(residents, kv, rem)


def test_server_peak_cache_matches_reference():
    cluster, base = build_bench_cluster(8, seed=3)
    rng = np.random.default_rng(3)
    for s in cluster.servers:
        for _ in range(25):
            kv = int(rng.integers(1, 3000))
            rem = int(rng.integers(1, 600))
            assert s.peak_kv_with(kv, rem) == \
                predict_peak_kv(s.resident_summaries(), kv, rem)


# -- admission fast paths against the reference walks ------------------------


def test_decode_feasible_fast_matches_exact():
    cluster, base = build_bench_cluster(12, seed=4)
    t = cluster.table
    rng = np.random.default_rng(4)
    checked = 0
    for i in range(400):
        rid = base + int(rng.integers(0, 1000))
        s = cluster.servers[int(rng.integers(0, 12))]
        kv = int(t.p[rid] + t.gen[rid])
        rem = int(rng.integers(1, 600))
        deadline = int(rng.integers(10_000, 2_000_000))
        got = decode_feasible(s, kv, rem, deadline, 0, MODEL)
        ref = decode_feasible(s, kv, rem, deadline, 0, MODEL, exact=True)
        assert got[0] == ref[0]
        if got[0]:
            assert got[1] == ref[1]
        checked += 1
    assert checked == 400


def _co_cluster(n_servers=8, seed=5):
    cluster, base = build_bench_cluster(n_servers, seed=seed)
    rng = np.random.default_rng(seed)
    for s in cluster.servers:
        s.role = Role.COLOCATED
        # Thin the decode load so chunk budgets leave room for prefills.
        keep = s.req_ids[:int(rng.integers(4, 16))]
        t = cluster.table
        s.req_ids = keep
        s.kv_total = int((t.p[keep] + t.gen[keep]).sum())
        if rng.random() < 0.6:
            p = int(rng.integers(100, 2000))
            c = int(rng.integers(50, 400))
            job = PrefillJob(0, p, dynamic_chunk_plan(p, c),
                             int(rng.integers(200_000, 2_000_000)))
            s.prefill_jobs.append(job)
            s.kv_total += 0
        s._invalidate()
    return cluster, base, rng


def test_admit_co_fast_matches_exact():
    cluster, base, rng = _co_cluster()
    t = cluster.table
    for i in range(400):
        rid = base + int(rng.integers(0, 1000))
        s = cluster.servers[int(rng.integers(0, 8))]
        p = int(t.p[rid])
        deadline = int(rng.integers(50_000, 2_000_000))
        budget = int(rng.integers(64, 2049))
        got = admit_co(s, p, deadline, int(t.tpot[rid]), 0, MODEL, budget)
        ref = admit_co(s, p, deadline, int(t.tpot[rid]), 0, MODEL, budget,
                       exact=True)
        assert got[0] == ref[0], (i, got, ref)
        assert got[1] == ref[1]
        if got[0]:
            assert got[2] == ref[2]


def test_admit_co_rejects_without_chunk_room():
    cluster, base, rng = _co_cluster(seed=6)
    s = cluster.servers[0]
    budget = s.n_decode() + s.next_chunk_tokens()  # no room left
    ok, c, _, _, reason = admit_co(s, 100, 1_000_000, 100_000, 0, MODEL,
                                   budget)
    assert not ok and reason == "chunk" and c <= 0


def test_admit_co_protects_resident_prefill_deadlines():
    tiers = default_tiers()
    cfg = SchedulerConfig(policy="polyserve", architecture="co",
                          avg_decode_len=64)
    cluster = Cluster(2, tiers, cfg, MODEL)
    reqs = [Request(id=0, arrival_us=0, p=512, d_true=64, tier_id=3,
                    ttft_us=1_000_000, tpot_us=100_000)]
    cluster.table = RequestTable(reqs)
    s = cluster._acquire(cluster.tiers[3], 0, Role.COLOCATED)
    # A resident prefill with barely enough slack to finish alone.
    job = PrefillJob(0, 900, [300, 300, 300], deadline_us=0, chunk_size=300)
    solo = sum(MODEL.iteration_time(300, 300 * (k + 1), 300)
               for k in range(3))
    job.deadline_us = solo + 20_000
    s.prefill_jobs.append(job)
    s.kv_total = 0
    s._invalidate()
    ok, _, _, _, reason = admit_co(s, 2000, 10_000_000, 100_000, 0, MODEL,
                                   512)
    assert not ok and reason == "resident"
    # With a relaxed resident deadline the same admission goes through.
    job.deadline_us = 100_000_000
    ok2, _, _, _, reason2 = admit_co(s, 2000, 10_000_000, 100_000, 0, MODEL,
                                     512)
    assert ok2 and reason2 == "ok"


# -- tiered routing ----------------------------------------------------------


def _routing_cluster(n_servers=4, policy="polyserve", arch="pd"):
    tiers = default_tiers()
    cfg = SchedulerConfig(policy=policy, architecture=arch, avg_decode_len=64)
    cluster = Cluster(n_servers, tiers, cfg, MODEL)
    reqs = []
    for i in range(64):
        reqs.append(Request(id=i, arrival_us=0, p=100, d_true=64, tier_id=1,
                            ttft_us=1_000_000, tpot_us=30_000))
    cluster.table = RequestTable(reqs)
    return cluster


def _seed_residents(cluster, s, rids):
    t = cluster.table
    ids = np.asarray(rids, dtype=np.int64)
    s.req_ids = ids
    s.kv_total = int((t.p[ids] + t.gen[ids]).sum())
    s._invalidate()


def test_route_prefers_highest_loaded_feasible_server():
    cluster = _routing_cluster()
    tier = cluster.tiers[1]
    light = cluster._acquire(tier, 0, Role.DECODE)
    heavy = cluster._acquire(tier, 0, Role.DECODE)
    _seed_residents(cluster, light, [0, 1])
    _seed_residents(cluster, heavy, list(range(2, 22)))
    dec = cluster.route_decode_polyserve(40, 0)
    assert dec.outcome is Outcome.ASSIGN
    assert dec.server_id == heavy.id
    assert dec.predicted_iter_us >= MODEL.iteration_time(21, heavy.kv_total)


def test_route_tie_breaks_on_lower_ordinal():
    cluster = _routing_cluster()
    tier = cluster.tiers[1]
    first = cluster._acquire(tier, 0, Role.DECODE)
    second = cluster._acquire(tier, 0, Role.DECODE)
    _seed_residents(cluster, first, [0, 1, 2])
    _seed_residents(cluster, second, [3, 4, 5])
    dec = cluster.route_decode_polyserve(40, 0)
    assert dec.outcome is Outcome.ASSIGN
    assert dec.server_id == first.id  # equal load, earlier acquisition wins


def test_route_scales_up_before_promoting():
    cluster = _routing_cluster()
    # Home tier has no servers; the pool does.
    dec = cluster.route_decode_polyserve(40, 0)
    assert dec.outcome is Outcome.SCALE_UP_THEN_ASSIGN
    assert dec.tier_id == 1
    assert cluster.servers[dec.server_id].tier_id == 1


def test_route_promotes_only_into_spare_tighter_tier():
    cluster = _routing_cluster(n_servers=2)
    tight = cluster.tiers[0]
    spare = cluster._acquire(tight, 0, Role.DECODE)
    home = cluster._acquire(cluster.tiers[1], 0, Role.DECODE)
    # Saturate the home server so its tier is infeasible, pool now empty.
    _seed_residents(cluster, home, list(range(39)))
    home.kv_total = MODEL.kv_capacity  # memory-infeasible
    dec = cluster.route_decode_polyserve(39, 0)
    assert dec.outcome is Outcome.PROMOTE
    assert dec.server_id == spare.id and dec.tier_id == 0
    # A backlog on the tight tier withdraws the spare capacity.
    tight.queue.append((0, 0, 1))
    dec2 = cluster.route_decode_polyserve(40, 0)
    assert dec2.outcome is Outcome.QUEUE
    assert dec2.scanned_tiers == (1, 0)


def test_route_best_effort_uses_pool():
    cluster = _routing_cluster()
    t = cluster.table
    t.tier[50] = -1
    dec = cluster.route_decode_polyserve(50, 0)
    assert dec.outcome is Outcome.ASSIGN
    assert cluster.servers[dec.server_id] in cluster.pool


def test_baseline_routers_assign_and_queue():
    for policy in ("random", "minimal", "chunk_static"):
        cluster = _routing_cluster(policy=policy, arch="co")
        dec = cluster.route_baseline(0, 0)
        assert dec.outcome is Outcome.ASSIGN
        for s in cluster.flat_decode:
            s.kv_total = MODEL.kv_capacity
        dec2 = cluster.route_baseline(1, 0)
        assert dec2.outcome is Outcome.QUEUE


# -- autoscaling -------------------------------------------------------------


def test_autoscale_releases_idle_tail_server():
    cluster = _routing_cluster()
    tier = cluster.tiers[1]
    cluster._acquire(tier, 0, Role.DECODE)
    idle = cluster._acquire(tier, 0, Role.DECODE)
    actions = cluster.autoscale_tick(10_000)
    assert ("release", idle.id, 1) in actions
    assert cluster.servers[idle.id] in cluster.pool


def test_autoscale_pends_server_with_only_foreign_residents():
    cluster = _routing_cluster()
    tier = cluster.tiers[1]
    cluster._acquire(tier, 0, Role.DECODE)
    last = cluster._acquire(tier, 0, Role.DECODE)
    t = cluster.table
    t.tier[7] = 2  # resident from another tier keeps the server non-idle
    _seed_residents(cluster, last, [7])
    actions = cluster.autoscale_tick(10_000)
    assert ("pending", last.id, 1) in actions
    assert last.pending
    # Once drained, the pending server returns to the pool.
    last.req_ids = np.empty(0, dtype=np.int64)
    last.kv_total = 0
    last._invalidate()
    actions2 = cluster.autoscale_tick(20_000)
    assert ("drain", last.id, None) in actions2


def test_autoscale_scales_up_queued_tier():
    cluster = _routing_cluster()
    cluster.tiers[2].queue.append((0, 0, 9))
    actions = cluster.autoscale_tick(10_000)
    assert any(a[0] == "scale_up" and a[2] == 2 for a in actions)


# -- fair-share quotas -------------------------------------------------------


def test_tier_quotas_track_weighted_mix():
    cluster = _routing_cluster(n_servers=20)
    cluster.cfg.co_tier_budgets = {0: 88, 1: 177, 2: 354, 3: 798}
    cluster.cfg.architecture = "co"
    cluster.tier_arrivals = {0: 100, 1: 200, 2: 300, 3: 400}
    cluster.arrival_count = 1000
    cluster.arrival_p_sum = 512 * 1000
    quotas = cluster.tier_quotas()
    assert quotas[0] > 0
    assert sum(quotas.values()) == pytest.approx(20.0)
    # Weight per tier: arrivals * tpot / budget.
    w = {0: 100 * 20_000 / 88, 1: 200 * 30_000 / 177,
         2: 300 * 50_000 / 354, 3: 400 * 100_000 / 798}
    total = sum(w.values())
    for tid in range(4):
        assert quotas[tid] == pytest.approx(w[tid] / total * 20)


def test_tier_quotas_shift_toward_missing_tiers():
    cluster = _routing_cluster(n_servers=20)
    cluster.cfg.co_tier_budgets = {0: 88, 1: 177, 2: 354, 3: 798}
    cluster.cfg.architecture = "co"
    cluster.tier_arrivals = {0: 250, 1: 250, 2: 250, 3: 250}
    cluster.arrival_count = 1000
    base = dict(cluster.tier_quotas())
    cluster.tier_miss_ewma[0] = 50.0
    cluster.tier_ok_ewma[0] = 50.0
    for tid in (1, 2, 3):
        cluster.tier_ok_ewma[tid] = 100.0
    cluster._quota_cache = None
    shifted = cluster.tier_quotas()
    assert shifted[0] > base[0]
    assert sum(shifted.values()) == pytest.approx(20.0)


def test_pd_batch_limit_monotone_in_tpot():
    cluster = _routing_cluster()
    cluster.arrival_p_sum = 512 * 100
    cluster.arrival_count = 100
    b20 = cluster._pd_batch_limit(20_000)
    b100 = cluster._pd_batch_limit(100_000)
    assert 1 <= b20 <= b100
