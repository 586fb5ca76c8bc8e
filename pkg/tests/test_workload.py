"""Request-stream generation: traces, synthesis, SLO assignment and
Poisson arrivals."""

import io
import json
import math

import numpy as np
import pytest

from polysim.perf_model import AnalyticModel, AnalyticParams, default_model
from polysim.workload import (BEST_EFFORT_TIER_ID, BEST_EFFORT_US, TICK_US,
                              Request, SloTier, TierDistribution, TraceError,
                              assign_slos, burst_flip, default_distribution,
                              default_tiers, dump_workload, generate_arrivals,
                              inverted_distribution, load_trace,
                              mean_decode_len, single_prefill_time_us,
                              synthesize_uniform)

MODEL = default_model()


def test_default_tiers_shape():
    tiers = default_tiers()
    assert [t.tpot_us for t in tiers] == [20_000, 30_000, 50_000, 100_000]
    assert all(t.ttft_us == 1_000_000 for t in tiers)


def test_distribution_validation():
    tiers = default_tiers()
    with pytest.raises(ValueError):  # probabilities off
        TierDistribution(tiers=tuple(zip(tiers, (0.5, 0.2, 0.2, 0.2))),
                         ttft_choices=((300_000, 1.0),))
    with pytest.raises(ValueError):  # unsorted tpot
        TierDistribution(tiers=tuple(zip(reversed(tiers), (0.1, 0.2, 0.3, 0.4))),
                         ttft_choices=((300_000, 1.0),))


def test_synthesize_uniform_bounds_and_determinism():
    pairs = synthesize_uniform(5000, 1024, 1024, seed=3)
    assert len(pairs) == 5000
    assert all(1 <= p <= 1024 and 1 <= d <= 1024 for p, d in pairs)
    assert pairs == synthesize_uniform(5000, 1024, 1024, seed=3)
    assert pairs != synthesize_uniform(5000, 1024, 1024, seed=4)
    # Uniform mean within 3 sigma.
    mean_p = sum(p for p, _ in pairs) / len(pairs)
    sigma = 1024 / math.sqrt(12 * len(pairs))
    assert abs(mean_p - 512.5) < 3 * sigma


def test_load_trace_csv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("input_len,output_len\n10,20\n0,5\n\n7,0\n")
    assert load_trace(str(path)) == [(10, 20), (1, 5), (7, 1)]


def test_load_trace_jsonl(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"input_len": 3, "output_len": 4}\n'
                    '{"input_len": 5, "output_len": 6}\n')
    assert load_trace(str(path), fmt="lengths_jsonl") == [(3, 4), (5, 6)]


def test_load_trace_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(TraceError):
        load_trace(str(bad))
    mal = tmp_path / "mal.csv"
    mal.write_text("input_len,output_len\nx,2\n")
    with pytest.raises(TraceError):
        load_trace(str(mal))
    with pytest.raises(ValueError):
        load_trace(str(bad), fmt="nope")


def test_assign_slos_draws_from_distribution():
    pairs = synthesize_uniform(4000, 1024, 1024, seed=0)
    reqs = assign_slos(pairs, default_distribution(), MODEL, seed=1)
    assert len(reqs) == 4000
    counts = {t.id: 0 for t in default_tiers()}
    for r in reqs:
        assert r.tier_id in counts
        counts[r.tier_id] += 1
        assert r.ttft_us in (300_000, 500_000, 1_000_000)
    # 10/20/30/40 mix, loose 5-sigma style bounds.
    for tid, frac in zip(range(4), (0.10, 0.20, 0.30, 0.40)):
        assert abs(counts[tid] / 4000 - frac) < 0.05


def test_assign_slos_ttft_cascade_on_long_prefill():
    # A two-chunk prefill of p=4096 takes ~430 ms on the default model,
    # so a 300 ms TTFT draw must cascade to 500 ms.
    pf = single_prefill_time_us(MODEL, 4096, 2048)
    assert 300_000 < pf <= 500_000
    reqs = assign_slos([(4096, 8)] * 300, default_distribution(), MODEL, seed=2)
    assert all(r.ttft_us >= 500_000 for r in reqs)
    assert any(r.ttft_us == 500_000 for r in reqs)


def test_assign_slos_tpot_cascade():
    # Inflated KV coefficient: a lone decode iteration at p+d=6000 takes
    # 15000 + 6000 us, infeasible for the 20 ms tier only.
    model = AnalyticModel(AnalyticParams(d1_us_per_kv_token=1.0,
                                         kv_capacity=450_000))
    reqs = assign_slos([(5000, 1000)] * 400, default_distribution(), model,
                       seed=3, prefill_budget=2048)
    assert all(r.tier_id != 0 for r in reqs)
    assert any(r.tier_id == 1 for r in reqs)


def test_assign_slos_best_effort_fallback():
    # Nothing fits: even the loosest tier's TPOT is exceeded.
    model = AnalyticModel(AnalyticParams(d1_us_per_kv_token=1000.0,
                                         kv_capacity=450_000))
    reqs = assign_slos([(500, 500)] * 10, default_distribution(), model, seed=4)
    assert all(r.tier_id == BEST_EFFORT_TIER_ID for r in reqs)
    assert all(r.ttft_us == BEST_EFFORT_US for r in reqs)
    assert all(r.best_effort for r in reqs)


def test_generate_arrivals_tick_aligned_and_calibrated():
    pairs = synthesize_uniform(20_000, 64, 64, seed=5)
    reqs = assign_slos(pairs, default_distribution(), MODEL, seed=6)
    rate = 100.0
    timed = generate_arrivals(reqs, rate, seed=7)
    arr = np.asarray([r.arrival_us for r in timed])
    assert (arr % TICK_US == 0).all()
    # Mean inter-arrival gap within 3 sigma of 1/rate.
    gaps = np.diff(np.sort(arr))
    mean_gap = float(arr[-1]) / (len(arr) - 1)
    expect = 1e6 / rate
    assert abs(mean_gap - expect) < 3 * expect / math.sqrt(len(arr))
    with pytest.raises(ValueError):
        generate_arrivals(reqs, 0.0, seed=1)


def test_burst_flip_splits_distributions():
    pairs = synthesize_uniform(6000, 256, 256, seed=8)
    reqs = burst_flip(pairs, 3000, default_distribution(),
                      inverted_distribution(), MODEL, seeds=(9, 10))
    assert [r.id for r in reqs] == list(range(6000))
    head = [r for r in reqs[:3000] if r.tier_id == 3]
    tail = [r for r in reqs[3000:] if r.tier_id == 3]
    # Loosest tier goes from 40% to 10% after the flip.
    assert len(head) > 2.5 * len(tail)
    with pytest.raises(ValueError):
        burst_flip(pairs, 9999, default_distribution(),
                   inverted_distribution(), MODEL, seeds=(0, 1))


def test_dump_workload_jsonl():
    reqs = [Request(id=0, arrival_us=1000, p=5, d_true=6, tier_id=1,
                    ttft_us=300_000, tpot_us=30_000)]
    out = io.StringIO()
    dump_workload(reqs, out)
    obj = json.loads(out.getvalue())
    assert obj == {"id": 0, "arrival_us": 1000, "p": 5, "d": 6,
                   "tier_ttft_us": 300_000, "tier_tpot_us": 30_000}


def test_mean_decode_len():
    assert mean_decode_len([]) == 1
    assert mean_decode_len([(1, 10), (1, 20)]) == 15
    assert mean_decode_len([(1, 1)]) == 1
