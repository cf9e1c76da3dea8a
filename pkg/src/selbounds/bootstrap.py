"""Percentile bootstrap for the identified interval.

Each resample draws ``n`` rows with replacement, re-solves both fractional
programs and records the bounds.  Resample ``r`` uses its own counter-based
stream keyed by ``(seed, r, attempt)``, so results do not depend on the order
or batching in which resamples are processed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Estimand,
    FloatArray,
    ObservationSet,
    SelectionBoundsError,
    SupportTable,
    WeightBox,
    collapse_support,
)
from .lfp import solve_bounds_batch

MAX_FAILURE_FRACTION = 0.01
_BATCH = 128


class EmptyDraws(SelectionBoundsError):
    pass


class BootstrapFailure(SelectionBoundsError):
    """Too many resamples had a vanishing denominator."""


@dataclass(frozen=True)
class BootstrapCI:
    c_lo: float
    c_hi: float
    R: int
    alpha: float
    seed: int
    lo_draws: FloatArray
    hi_draws: FloatArray
    redraws: int = 0

    @property
    def width(self) -> float:
        return self.c_hi - self.c_lo

    def contains(self, lo: float, hi: float | None = None) -> bool:
        hi = lo if hi is None else hi
        return self.c_lo <= lo and hi <= self.c_hi


def quantile(draws, q: float) -> float:
    """Type-7 sample quantile (linear interpolation, ``h = (m - 1) q``)."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    if x.size == 0:
        raise EmptyDraws("no draws")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    h = (x.size - 1) * q
    j = int(np.floor(h))
    if j >= x.size - 1:
        return float(x[-1])
    return float(x[j] + (h - j) * (x[j + 1] - x[j]))


def resample_stream(seed: int, r: int, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(r, attempt))
    return np.random.Generator(np.random.Philox(ss))


def resample_indices(n: int, seed: int, r: int, attempt: int = 0) -> np.ndarray:
    """Row indices of resample ``r`` (drawn with replacement)."""
    return resample_stream(seed, r, attempt).integers(0, n, size=n)


def _row_cells(table: SupportTable) -> np.ndarray:
    if table.inverse is not None:
        return table.inverse
    return np.repeat(np.arange(table.K), table.count)


def bootstrap_table(table: SupportTable, box: WeightBox, R: int = 1000, alpha: float = 0.05,
                    seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap on an already collapsed sample."""
    if R < 100:
        raise ValueError("need at least 100 resamples")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    cells = _row_cells(table)
    n, K = cells.shape[0], table.K
    if n < 2:
        raise ValueError("need at least two observations")
    lo = np.empty(R)
    hi = np.empty(R)
    redraws = 0
    budget = int(np.floor(MAX_FAILURE_FRACTION * R))
    for start in range(0, R, _BATCH):
        rs = range(start, min(R, start + _BATCH))
        counts = np.stack([np.bincount(cells[resample_indices(n, seed, r)], minlength=K) for r in rs])
        b_lo, b_hi, ok = solve_bounds_batch(table.f, table.g, counts.astype(float), box)
        for i in np.flatnonzero(~ok):
            r = rs[i]
            attempt = 0
            while not ok[i]:
                attempt += 1
                redraws += 1
                if redraws > budget:
                    raise BootstrapFailure(
                        f"more than {MAX_FAILURE_FRACTION:.0%} of resamples had a denominator "
                        "that vanishes on the weight box (weak instrument?)"
                    )
                c = np.bincount(cells[resample_indices(n, seed, r, attempt)], minlength=K)
                l1, h1, ok1 = solve_bounds_batch(table.f, table.g, c[None].astype(float), box)
                b_lo[i], b_hi[i], ok[i] = l1[0], h1[0], ok1[0]
        lo[start:start + len(rs)] = b_lo
        hi[start:start + len(rs)] = b_hi
    return BootstrapCI(
        quantile(lo, alpha / 2), quantile(hi, 1 - alpha / 2), R, alpha, seed, lo, hi, redraws
    )


def bootstrap_ci(obs: ObservationSet, est: Estimand, box: WeightBox, R: int = 1000,
                 alpha: float = 0.05, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval ``[Q_{alpha/2}(lo draws), Q_{1-alpha/2}(hi draws)]``.

    Resampling is over raw rows.  Solving on the original cells with resampled
    counts is the same program as re-collapsing the resample, since cells that
    were not drawn carry zero mass.
    """
    return bootstrap_table(collapse_support(obs, est), box, R, alpha, seed)
