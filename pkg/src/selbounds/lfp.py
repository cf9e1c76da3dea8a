"""Box-constrained linear fractional programs over support cells.

The maximiser of ``sum w f p / sum w g p`` over ``[lo, hi]^K`` puts weight ``hi``
on every cell with ``f_k - beta* g_k > 0`` and ``lo`` elsewhere.  Sorting the
cells by ``f_k / g_k`` makes the candidate sign patterns a one-parameter family
(the position of ``beta*`` in the sorted ratios), which is scanned with prefix
sums.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import (
    FloatArray,
    IntervalEstimate,
    SelectionBoundsError,
    SupportTable,
    WeightBox,
    ZeroDenominator,
    denominator_range,
    evaluate,
)

MAX_BRUTEFORCE_K = 20
_DEGENERACY_RTOL = 64 * np.finfo(float).eps


class SupportTooLarge(SelectionBoundsError):
    def __init__(self, K: int):
        super().__init__(f"brute-force enumeration needs K <= {MAX_BRUTEFORCE_K}, got K={K}")
        self.K = K


class NotAVertex(SelectionBoundsError):
    pass


@dataclass(frozen=True)
class _Ordered:
    """Cells with nonzero g sorted by ratio, plus the fixed contribution of g == 0 cells."""

    order: np.ndarray
    ratio: FloatArray
    pos: np.ndarray  # g > 0 among the sorted cells
    zero_idx: np.ndarray


def _order_cells(f: FloatArray, g: FloatArray) -> _Ordered:
    nz = np.flatnonzero(g != 0.0)
    ratio = f[nz] / g[nz]
    srt = np.argsort(ratio, kind="stable")
    order = nz[srt]
    return _Ordered(order, ratio[srt], g[order] > 0, np.flatnonzero(g == 0.0))


def _orient(table: SupportTable, box: WeightBox) -> tuple[FloatArray, FloatArray]:
    """Return (f, g) flipped if needed so the denominator is positive on the box."""
    dmin, dmax = denominator_range(table, box)
    if dmin > 0:
        return table.f, table.g
    if dmax < 0:
        return -table.f, -table.g
    raise ZeroDenominator(
        f"weighted denominator ranges over [{dmin:.6g}, {dmax:.6g}] on the box, "
        "which includes zero (weak instrument?)"
    )


def _scan(fp: FloatArray, gp: FloatArray, ordered: _Ordered, lo: float, hi: float, maximize: bool):
    """Evaluate every threshold candidate; return (values, below-weights, above-weights).

    Candidate ``j`` treats the first ``j`` sorted cells as having ratio below the
    optimum.  ``fp``/``gp`` may be 2-D (batch of mass vectors, cells on the last axis).
    """
    pos = ordered.pos
    if maximize:
        w_below = np.where(pos, lo, hi)
        w_above = np.where(pos, hi, lo)
    else:
        w_below = np.where(pos, hi, lo)
        w_above = np.where(pos, lo, hi)
    fo = fp[..., ordered.order]
    go = gp[..., ordered.order]

    def candidate_sums(x):
        below = np.cumsum(x * w_below, axis=-1)
        above = np.cumsum((x * w_above)[..., ::-1], axis=-1)[..., ::-1]
        zeros = np.zeros(x.shape[:-1] + (1,))
        below = np.concatenate([zeros, below], axis=-1)
        above = np.concatenate([above, zeros], axis=-1)
        return below + above

    num = candidate_sums(fo)
    den = candidate_sums(go)
    z = ordered.zero_idx
    if z.size:
        fz = fp[..., z]
        # g == 0 cells: weight depends only on the sign of f
        if maximize:
            wz = np.where(fz > 0, hi, lo)
        else:
            wz = np.where(fz < 0, hi, lo)
        num = num + np.sum(wz * fz, axis=-1, keepdims=True)
    return num / den, w_below, w_above


def _vertex_from_beta(f, g, beta, lo, hi, maximize):
    """The weight vector of the threshold form at optimum ``beta``.

    Cells with ``f_k - beta g_k == 0`` (to rounding) are indifferent and get ``lo``.
    """
    resid = f - beta * g
    scale = np.maximum(np.abs(f), np.abs(beta * g))
    degenerate = np.abs(resid) <= _DEGENERACY_RTOL * np.maximum(scale, 1e-300)
    if maximize:
        w = np.where(resid > 0, hi, lo)
    else:
        w = np.where(resid < 0, hi, lo)
    w = np.where(degenerate, lo, w)
    # inert cells (f = g = 0) are not "degenerate" in any useful sense
    degenerate &= ~((f == 0) & (g == 0))
    return w, tuple(int(k) for k in np.flatnonzero(degenerate))


def _solve_one(table: SupportTable, box: WeightBox, f, g, ordered, maximize: bool):
    lo, hi = box.lo, box.hi
    vals, _, _ = _scan(f * table.ratio_mass, g * table.ratio_mass, ordered, lo, hi, maximize)
    j = int(np.argmax(vals) if maximize else np.argmin(vals))
    w, degenerate = _vertex_from_beta(f, g, float(vals[j]), lo, hi, maximize)
    # report the directly evaluated value of the returned vertex, not the prefix-sum one
    return evaluate(table, w), w, degenerate


def solve_bounds(table: SupportTable, box: WeightBox) -> IntervalEstimate:
    """Exact lower and upper bounds of the weighted ratio over the weight box.

    Runs in ``O(K log K)``.  When a cell's ratio ``f_k / g_k`` equals an optimum the
    maximising vertex is not unique; the value is still exact, the cell index is
    reported in ``degenerate_cells_*`` and the indifferent cells get weight ``lo``.
    """
    f, g = _orient(table, box)
    if box.lo == box.hi:
        w = np.full(table.K, box.lo)
        b = evaluate(table, w)
        return IntervalEstimate(b, b, w, w.copy())
    ordered = _order_cells(f, g)
    b_hi, w_hi, d_hi = _solve_one(table, box, f, g, ordered, True)
    b_lo, w_lo, d_lo = _solve_one(table, box, f, g, ordered, False)
    return IntervalEstimate(b_lo, b_hi, w_lo, w_hi, d_lo, d_hi)


def solve_bounds_batch(f: FloatArray, g: FloatArray, masses: FloatArray, box: WeightBox):
    """Bounds for many mass vectors over the same cells at once.

    ``masses`` is ``(R, K)``; zero masses are allowed (the cell is simply absent).
    Returns ``(beta_lo, beta_hi, denominator_ok)`` arrays of length ``R``.  Rows
    whose denominator is not bounded away from zero on the box have ``nan`` bounds
    and ``denominator_ok`` false.
    """
    masses = np.atleast_2d(np.asarray(masses, dtype=float))
    gp = g * masses
    dmin = np.sum(np.where(gp > 0, box.lo, box.hi) * gp, axis=1)
    dmax = np.sum(np.where(gp > 0, box.hi, box.lo) * gp, axis=1)
    sign = np.where(dmin > 0, 1.0, np.where(dmax < 0, -1.0, 0.0))
    ok = sign != 0
    fp = f * masses * np.where(ok, sign, 1.0)[:, None]
    gp = gp * np.where(ok, sign, 1.0)[:, None]
    # a sign flip multiplies both f and g by -1 and leaves the ratio order unchanged,
    # but it swaps which cells count as g > 0; handle the two orientations separately
    beta_lo = np.full(masses.shape[0], np.nan)
    beta_hi = np.full(masses.shape[0], np.nan)
    for s in (1.0, -1.0):
        rows = np.flatnonzero(sign == s)
        if rows.size == 0:
            continue
        ordered = _order_cells(s * f, s * g)
        vmax, _, _ = _scan(fp[rows], gp[rows], ordered, box.lo, box.hi, True)
        vmin, _, _ = _scan(fp[rows], gp[rows], ordered, box.lo, box.hi, False)
        beta_hi[rows] = vmax.max(axis=1)
        beta_lo[rows] = vmin.min(axis=1)
    return beta_lo, beta_hi, ok


def solve_bounds_bruteforce(table: SupportTable, box: WeightBox) -> IntervalEstimate:
    """Enumerate all ``2^K`` vertices of the box (verification oracle)."""
    K = table.K
    if K > MAX_BRUTEFORCE_K:
        raise SupportTooLarge(K)
    _orient(table, box)
    verts = np.array(list(itertools.product((box.lo, box.hi), repeat=K)), dtype=float)
    m = table.ratio_mass
    num = verts @ (table.f * m)
    den = verts @ (table.g * m)
    vals = num / den
    j_hi = int(np.argmax(vals))
    j_lo = int(np.argmin(vals))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(vals))))
    ties_hi = np.flatnonzero(vals >= vals[j_hi] - tol)
    ties_lo = np.flatnonzero(vals <= vals[j_lo] + tol)
    # cells whose weight differs among optimal vertices are the degenerate ones
    d_hi = tuple(int(k) for k in np.flatnonzero(np.ptp(verts[ties_hi], axis=0) > 0))
    d_lo = tuple(int(k) for k in np.flatnonzero(np.ptp(verts[ties_lo], axis=0) > 0))
    return IntervalEstimate(
        float(vals[j_lo]), float(vals[j_hi]), verts[j_lo], verts[j_hi], d_lo, d_hi
    )


def optimal_vertices(table: SupportTable, box: WeightBox, maximize: bool = True, tol: float = 1e-12):
    """All vertices attaining the optimum (brute force, small K only)."""
    if table.K > MAX_BRUTEFORCE_K:
        raise SupportTooLarge(table.K)
    verts = np.array(list(itertools.product((box.lo, box.hi), repeat=table.K)), dtype=float)
    m = table.ratio_mass
    vals = (verts @ (table.f * m)) / (verts @ (table.g * m))
    best = vals.max() if maximize else vals.min()
    keep = np.abs(vals - best) <= tol * max(1.0, abs(best))
    return verts[keep], float(best)


def check_global_optimality(table: SupportTable, box: WeightBox, w, beta: float, direction: str = "max") -> bool:
    """First-order test of a vertex: ``q_k f_k >= beta q_k g_k`` for every cell.

    ``q_k = w_k - (lo + hi - w_k)`` is the signed step to the opposite face; for
    ``direction="min"`` the inequality is reversed.
    """
    w = np.asarray(w, dtype=float)
    lo, hi = box.lo, box.hi
    at_lo = np.isclose(w, lo, rtol=0, atol=1e-12 * hi)
    at_hi = np.isclose(w, hi, rtol=0, atol=1e-12 * hi)
    if w.shape != (table.K,) or not np.all(at_lo | at_hi):
        raise NotAVertex("weight vector is not a vertex of the box")
    f, g = _orient(table, box)
    q = w - (lo + hi - w)
    lhs = q * f
    rhs = beta * q * g
    tol = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    if direction == "max":
        return bool(np.all(lhs >= rhs - tol))
    if direction == "min":
        return bool(np.all(lhs <= rhs + tol))
    raise ValueError("direction must be 'max' or 'min'")
