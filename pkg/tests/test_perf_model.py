"""Iteration-time model tests: analytic values, table interpolation,
vectorized/scalar agreement and profile loading."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polysim.perf_model import (AnalyticModel, AnalyticParams, ProfileError,
                                ProfileTable, TableModel, default_model,
                                iteration_time, load_profile)


def test_flat_region_below_knee():
    m = default_model()
    # Below the batching knee the GEMM term is flat at g0.
    assert m.iteration_time(1, 0) == 15_000
    assert m.iteration_time(50, 0) == 15_000


def test_linear_above_knee():
    m = default_model()
    assert m.iteration_time(51, 0) == 15_100
    assert m.iteration_time(150, 0) == 15_000 + 100 * 100


def test_kv_and_chunk_terms():
    m = default_model()
    # 0.033 us per KV token and per prefill-chunk token.
    assert m.iteration_time(1, 300_000) == 15_000 + 9_900
    assert m.iteration_time(100, 10_000, 100) == round(
        15_000 + 100 * 50 + 0.033 * 10_000 + 0.033 * 100)


def test_monotone_in_all_arguments():
    m = default_model()
    base = m.iteration_time(100, 1000, 50)
    assert m.iteration_time(101, 1000, 50) >= base
    assert m.iteration_time(100, 1001, 50) >= base
    assert m.iteration_time(100, 1000, 51) >= base


def test_validation_rejects_negative_inputs():
    m = default_model()
    with pytest.raises(ValueError):
        iteration_time(m, -1, 0)
    with pytest.raises(ValueError):
        iteration_time(m, 10, -1)
    with pytest.raises(ValueError):
        iteration_time(m, 5, 0, 6)  # chunk larger than batch


def test_params_validation():
    with pytest.raises(ValueError):
        AnalyticParams(g0_us=-1)
    with pytest.raises(ValueError):
        AnalyticParams(b_knee=0)
    with pytest.raises(ValueError):
        AnalyticParams(kv_capacity=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5000),
                          st.integers(0, 500_000),
                          st.integers(0, 2048)),
                min_size=1, max_size=40))
def test_vectorized_matches_scalar(rows):
    m = default_model()
    batch = np.asarray([b for b, _, _ in rows], dtype=np.int64)
    kv = np.asarray([k for _, k, _ in rows], dtype=np.int64)
    chunk = np.asarray([c for _, _, c in rows], dtype=np.int64)
    vec = m.iteration_time_vec(batch, kv, chunk)
    for i, (b, k, c) in enumerate(rows):
        assert int(vec[i]) == m.iteration_time(b, k, c)


def _small_table() -> ProfileTable:
    return ProfileTable(
        batch_axis=(1, 100),
        kv_axis=(0, 1000),
        times_us=((100, 200), (300, 600)),
    )


def test_table_exact_nodes():
    tm = TableModel(_small_table(), pf1_us_per_token=0.0)
    assert tm.iteration_time(1, 0) == 100
    assert tm.iteration_time(100, 1000) == 600


def test_table_bilinear_midpoint():
    tm = TableModel(_small_table(), pf1_us_per_token=0.0)
    assert tm.iteration_time(50, 500) == round(
        ((100 + 200) / 2 * (1 - 49 / 99) + (300 + 600) / 2 * (49 / 99)))


def test_table_clamps_outside_grid():
    tm = TableModel(_small_table(), pf1_us_per_token=0.0)
    assert tm.iteration_time(0, 0) == 100
    assert tm.iteration_time(10_000, 10_000_000) == 600


def test_table_chunk_term_is_analytic():
    tm = TableModel(_small_table(), pf1_us_per_token=1.0)
    assert tm.iteration_time(1, 0, 0) == 100
    # Chunk term added on top of the interpolated grid value.
    assert TableModel(_small_table(), pf1_us_per_token=1.0).iteration_time(
        100, 0, 50) == 300 + 50


def test_table_capacity_defaults_to_axis_end():
    tm = TableModel(_small_table())
    assert tm.kv_capacity == 1000
    assert TableModel(_small_table(), kv_capacity=99).kv_capacity == 99


def test_table_validation():
    with pytest.raises(ProfileError):
        ProfileTable(batch_axis=(), kv_axis=(0,), times_us=())
    with pytest.raises(ProfileError):
        ProfileTable(batch_axis=(2, 1), kv_axis=(0,), times_us=((1,), (2,)))
    with pytest.raises(ProfileError):  # non-monotone along kv
        ProfileTable(batch_axis=(1,), kv_axis=(0, 10), times_us=((5, 4),))
    with pytest.raises(ProfileError):  # non-monotone along batch
        ProfileTable(batch_axis=(1, 2), kv_axis=(0,), times_us=((5,), (4,)))


def test_load_profile_roundtrip(tmp_path):
    path = tmp_path / "profile.csv"
    path.write_text(
        "batch_tokens,kv_tokens,iter_time_us\n"
        "100,0,300\n1,1000,200\n1,0,100\n100,1000,600\n")
    table = load_profile(str(path))
    assert table.batch_axis == (1, 100)
    assert table.kv_axis == (0, 1000)
    assert table.times_us == ((100, 200), (300, 600))


def test_load_profile_errors(tmp_path):
    bad_header = tmp_path / "a.csv"
    bad_header.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ProfileError):
        load_profile(str(bad_header))
    missing = tmp_path / "b.csv"
    missing.write_text("batch_tokens,kv_tokens,iter_time_us\n"
                       "1,0,100\n2,0,110\n1,5,120\n")
    with pytest.raises(ProfileError):
        load_profile(str(missing))  # (2, 5) cell absent
    malformed = tmp_path / "c.csv"
    malformed.write_text("batch_tokens,kv_tokens,iter_time_us\n1,0,x\n")
    with pytest.raises(ProfileError):
        load_profile(str(malformed))
    empty = tmp_path / "d.csv"
    empty.write_text("batch_tokens,kv_tokens,iter_time_us\n")
    with pytest.raises(ProfileError):
        load_profile(str(empty))


def test_components_sum_to_iteration_time():
    m = default_model()
    b, kv, c = 200, 50_000, 128
    assert m.iteration_time(b, kv, c) == round(
        m.gemm_component(b) + m.attn_component(kv) + m.prefill_component(c))
