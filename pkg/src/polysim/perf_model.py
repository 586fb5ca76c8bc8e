"""Iteration-time prediction for a serving instance.

Predicts how long one engine iteration takes as a function of the token
batch size (decode tokens + prefill chunk tokens) and the total KV cache
size resident on the instance.  Two backends: a piecewise-linear analytic
model and a loaded profiling table with bilinear interpolation.

All durations are integer microseconds; this is the single time unit used
throughout the simulator.
"""

from __future__ import annotations

import csv
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np


class ProfileError(ValueError):
    """Raised for malformed or inconsistent profile tables."""


@dataclass(frozen=True)
class AnalyticParams:
    """Coefficients of the analytic iteration-time model.

    GEMM time is flat at ``g0_us`` below the batching knee and grows
    linearly above it; decode attention is linear in resident KV tokens;
    prefill attention is linear in the chunk size.
    """

    g0_us: float = 15_000.0
    g1_us_per_token: float = 100.0
    b_knee: int = 50
    d1_us_per_kv_token: float = 0.033
    pf1_us_per_token: float = 0.033
    kv_capacity: int = 450_000

    def __post_init__(self) -> None:
        if min(self.g0_us, self.g1_us_per_token, self.d1_us_per_kv_token,
               self.pf1_us_per_token) < 0:
            raise ValueError("durations must be nonnegative")
        if self.b_knee < 1:
            raise ValueError("b_knee must be >= 1")
        if self.kv_capacity < 1:
            raise ValueError("kv_capacity must be >= 1")


def gemm_time(params: AnalyticParams, batch_tokens: int) -> float:
    """GEMM time for one iteration with ``batch_tokens`` batched tokens."""
    if batch_tokens < 0:
        raise ValueError("batch_tokens must be >= 0")
    return params.g0_us + params.g1_us_per_token * max(0, batch_tokens - params.b_knee)


def decode_attn_time(params: AnalyticParams, kv_tokens: float) -> float:
    """Decode-attention time over ``kv_tokens`` resident KV tokens."""
    if kv_tokens < 0:
        raise ValueError("kv_tokens must be >= 0")
    return params.d1_us_per_kv_token * kv_tokens


def prefill_attn_time(params: AnalyticParams, chunk_tokens: int) -> float:
    """Prefill-attention time for a chunk of ``chunk_tokens`` tokens."""
    return params.pf1_us_per_token * chunk_tokens


@dataclass(frozen=True)
class ProfileTable:
    """A validated (batch, kv) -> iteration time grid.

    Axes are strictly increasing and times are monotone nondecreasing
    along both axes.
    """

    batch_axis: tuple[int, ...]
    kv_axis: tuple[int, ...]
    times_us: tuple[tuple[int, ...], ...]  # times_us[i][j] at (batch_axis[i], kv_axis[j])

    def __post_init__(self) -> None:
        if not self.batch_axis or not self.kv_axis:
            raise ProfileError("profile table is empty")
        for name, axis in (("batch", self.batch_axis), ("kv", self.kv_axis)):
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ProfileError(f"{name} axis is not strictly increasing")
        if len(self.times_us) != len(self.batch_axis) or any(
            len(row) != len(self.kv_axis) for row in self.times_us
        ):
            raise ProfileError("grid dimensions do not match axes")
        t = self.times_us
        for i in range(len(self.batch_axis)):
            for j in range(len(self.kv_axis)):
                if i > 0 and t[i][j] < t[i - 1][j]:
                    raise ProfileError(
                        f"non-monotone along batch axis at "
                        f"(batch={self.batch_axis[i]}, kv={self.kv_axis[j]})"
                    )
                if j > 0 and t[i][j] < t[i][j - 1]:
                    raise ProfileError(
                        f"non-monotone along kv axis at "
                        f"(batch={self.batch_axis[i]}, kv={self.kv_axis[j]})"
                    )


def _interp_axis(axis: tuple[int, ...], x: float) -> tuple[int, int, float]:
    """Clamped bracketing of x on a sorted axis -> (lo_idx, hi_idx, frac)."""
    if x <= axis[0]:
        return 0, 0, 0.0
    if x >= axis[-1]:
        n = len(axis) - 1
        return n, n, 0.0
    hi = bisect_left(axis, x)
    if axis[hi] == x:
        return hi, hi, 0.0
    lo = hi - 1
    frac = (x - axis[lo]) / (axis[hi] - axis[lo])
    return lo, hi, frac


class PerfModel:
    """Common interface of the iteration-time backends."""

    kv_capacity: int

    def iteration_time(self, batch_tokens: int, kv_tokens: float,
                       prefill_chunk_tokens: int = 0) -> int:
        raise NotImplementedError

    def iteration_time_vec(self, batch_tokens, kv_tokens,
                           prefill_chunk_tokens) -> "np.ndarray":
        """Element-wise iteration times; must match the scalar path exactly."""
        return np.asarray([
            self.iteration_time(int(b), float(k), int(c))
            for b, k, c in zip(batch_tokens, kv_tokens, prefill_chunk_tokens)
        ], dtype=np.int64)

    # Component accessors used by the capacity/cost math.
    def gemm_component(self, batch_tokens: int) -> float:
        raise NotImplementedError

    def attn_component(self, kv_tokens: float) -> float:
        raise NotImplementedError

    def prefill_component(self, chunk_tokens: int) -> float:
        raise NotImplementedError


class AnalyticModel(PerfModel):
    """Piecewise-linear analytic backend."""

    def __init__(self, params: AnalyticParams | None = None):
        self.params = params or AnalyticParams()
        self.kv_capacity = self.params.kv_capacity
        # Hot-path scalars (the simulator calls iteration_time millions of times).
        self._g0 = self.params.g0_us
        self._g1 = self.params.g1_us_per_token
        self._knee = self.params.b_knee
        self._d1 = self.params.d1_us_per_kv_token
        self._pf1 = self.params.pf1_us_per_token

    def iteration_time(self, batch_tokens: int, kv_tokens: float,
                       prefill_chunk_tokens: int = 0) -> int:
        over = batch_tokens - self._knee
        t = self._g0 + self._d1 * kv_tokens + self._pf1 * prefill_chunk_tokens
        if over > 0:
            t += self._g1 * over
        return int(round(t))

    def iteration_time_vec(self, batch_tokens, kv_tokens,
                           prefill_chunk_tokens) -> np.ndarray:
        batch = np.asarray(batch_tokens)
        # Same operation order as the scalar path, so rounding agrees.
        t = (self._g0 + self._d1 * np.asarray(kv_tokens, dtype=np.float64)
             + self._pf1 * np.asarray(prefill_chunk_tokens, dtype=np.float64))
        over = batch - self._knee
        t = t + np.where(over > 0, self._g1 * over, 0.0)
        return np.rint(t).astype(np.int64)

    def gemm_component(self, batch_tokens: int) -> float:
        return gemm_time(self.params, batch_tokens)

    def attn_component(self, kv_tokens: float) -> float:
        return decode_attn_time(self.params, kv_tokens)

    def prefill_component(self, chunk_tokens: int) -> float:
        return prefill_attn_time(self.params, chunk_tokens)


class TableModel(PerfModel):
    """Profile-table backend: bilinear interpolation, clamped at the edges.

    The prefill-chunk term is not part of the profiled grid and is added
    analytically via ``pf1_us_per_token``.
    """

    def __init__(self, table: ProfileTable, pf1_us_per_token: float = 0.033,
                 kv_capacity: int | None = None):
        if not table.batch_axis:
            raise ProfileError("empty profile table")
        self.table = table
        self.pf1 = pf1_us_per_token
        self.kv_capacity = kv_capacity if kv_capacity is not None else table.kv_axis[-1]

    def _grid_interp(self, batch_tokens: float, kv_tokens: float) -> float:
        bi, bj, bf = _interp_axis(self.table.batch_axis, batch_tokens)
        ki, kj, kf = _interp_axis(self.table.kv_axis, kv_tokens)
        t = self.table.times_us
        t0 = t[bi][ki] * (1 - kf) + t[bi][kj] * kf
        t1 = t[bj][ki] * (1 - kf) + t[bj][kj] * kf
        return t0 * (1 - bf) + t1 * bf

    def iteration_time(self, batch_tokens: int, kv_tokens: float,
                       prefill_chunk_tokens: int = 0) -> int:
        base = self._grid_interp(batch_tokens, kv_tokens)
        return int(round(base + self.pf1 * prefill_chunk_tokens))

    def gemm_component(self, batch_tokens: int) -> float:
        # Min-KV column approximates the pure GEMM curve.
        return self._grid_interp(batch_tokens, self.table.kv_axis[0])

    def attn_component(self, kv_tokens: float) -> float:
        b0 = self.table.batch_axis[0]
        return self._grid_interp(b0, kv_tokens) - self._grid_interp(b0, self.table.kv_axis[0])

    def prefill_component(self, chunk_tokens: int) -> float:
        return self.pf1 * chunk_tokens


def iteration_time(model: PerfModel, batch_tokens: int, kv_tokens: float,
                   prefill_chunk_tokens: int = 0) -> int:
    """Predicted iteration time, integer microseconds."""
    if prefill_chunk_tokens < 0 or batch_tokens < prefill_chunk_tokens:
        raise ValueError("need batch_tokens >= prefill_chunk_tokens >= 0")
    if kv_tokens < 0:
        raise ValueError("kv_tokens must be >= 0")
    return model.iteration_time(batch_tokens, kv_tokens, prefill_chunk_tokens)


PROFILE_HEADER = ["batch_tokens", "kv_tokens", "iter_time_us"]


def load_profile(path: str) -> ProfileTable:
    """Load a profile CSV (``batch_tokens,kv_tokens,iter_time_us``).

    Rows may arrive unsorted; the Cartesian grid must be complete.
    """
    cells: dict[tuple[int, int], int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PROFILE_HEADER:
            raise ProfileError(f"expected header {','.join(PROFILE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                b, k, t = (int(x) for x in row)
            except (TypeError, ValueError) as exc:
                raise ProfileError(f"malformed row at line {lineno}: {row!r}") from exc
            cells[(b, k)] = t
    if not cells:
        raise ProfileError("profile file contains no rows")
    batch_axis = tuple(sorted({b for b, _ in cells}))
    kv_axis = tuple(sorted({k for _, k in cells}))
    for b in batch_axis:
        for k in kv_axis:
            if (b, k) not in cells:
                raise ProfileError(f"missing grid cell (batch={b}, kv={k})")
    times = tuple(tuple(cells[(b, k)] for k in kv_axis) for b in batch_axis)
    return ProfileTable(batch_axis=batch_axis, kv_axis=kv_axis, times_us=times)


def default_model() -> AnalyticModel:
    """The calibrated default analytic model."""
    return AnalyticModel(AnalyticParams())
