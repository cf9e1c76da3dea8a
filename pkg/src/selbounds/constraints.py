"""Auxiliary population information as relaxed constraints on the weights.

A known population moment ``sum_k w_k H_k p_k = 0`` cannot be imposed exactly
because only ``phat`` is observed.  Each constraint is relaxed by a normal
critical value so that the population-feasible weights stay feasible with
probability at least ``1 - alpha_share``; the shares add up to ``alpha1``.
The bounds over the relaxed set are then widened at level ``alpha2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog, minimize

from .core import (
    FloatArray,
    SelectionBoundsError,
    SupportTable,
    WeightBox,
    evaluate,
)
from .inference import AsymptoticCI, sigma_hat, z_upper
from .lfp import solve_bounds


class InfeasibleByConstruction(SelectionBoundsError):
    pass


class InfeasibleConstraints(SelectionBoundsError):
    pass


class NonConvergence(SelectionBoundsError):
    pass


class ConstraintKind(enum.Enum):
    RESPONSE_RATE = "response_rate"
    COVARIATE_MEAN = "covariate_mean"
    GENERIC_LINEAR_MOMENT = "generic_linear_moment"


class LevelConvention(enum.Enum):
    """How alpha values in configs are read: as significance (0.02) or coverage (0.98)."""

    SIGNIFICANCE = "significance"
    COVERAGE = "coverage"


def to_significance(value: float, convention: LevelConvention | str = LevelConvention.SIGNIFICANCE) -> float:
    convention = LevelConvention(convention)
    out = 1.0 - value if convention is LevelConvention.COVERAGE else value
    if not 0.0 < out < 1.0:
        raise ValueError(f"level {value} is not valid under the {convention.value} convention")
    return out


@dataclass(frozen=True)
class AuxConstraint:
    """One piece of auxiliary information.

    ``alpha_share`` is the significance level spent on this constraint's
    feasibility.  For covariate means ``column`` names a column of the support
    table; for generic moments ``H`` maps cell columns to per-cell values and the
    constraint reads ``E[lambda H] <= 0``.
    """

    kind: ConstraintKind
    alpha_share: float
    r: float | None = None
    column: str | None = None
    qbar: float | None = None
    H: Callable[[Mapping[str, np.ndarray]], np.ndarray] | None = None

    @classmethod
    def response_rate(cls, r: float, alpha_share: float) -> "AuxConstraint":
        return cls(ConstraintKind.RESPONSE_RATE, alpha_share, r=r)

    @classmethod
    def covariate_mean(cls, column: str, qbar: float, alpha_share: float) -> "AuxConstraint":
        return cls(ConstraintKind.COVARIATE_MEAN, alpha_share, column=column, qbar=qbar)

    @classmethod
    def linear_moment(cls, H, alpha_share: float) -> "AuxConstraint":
        return cls(ConstraintKind.GENERIC_LINEAR_MOMENT, alpha_share, H=H)


@dataclass(frozen=True)
class RelaxedConstraint:
    """``value(w) <= 0`` describes the relaxed sample constraint.

    With the per-cell moment ``u_k w_k + v_k`` and ``m(w) = sum p (u w + v)``,
    ``s(w) = sum p (u w + v)^2``:

    * two-sided (quadratic) form: ``(1 + c^2) m^2 - c^2 s``, ``c = z_{a/2}/sqrt(n)``
    * one-sided form: ``m - c sqrt(s - m^2)``, ``c = z_a/sqrt(n)``
    """

    u: FloatArray
    v: FloatArray
    p: FloatArray
    c: float
    two_sided: bool
    label: str = ""

    def moments(self, w):
        x = self.u * w + self.v
        return float(np.sum(self.p * x)), float(np.sum(self.p * x * x)), x

    def value(self, w) -> float:
        m, s, _ = self.moments(w)
        c2 = self.c**2
        if self.two_sided:
            return (1.0 + c2) * m * m - c2 * s
        return m - self.c * math.sqrt(max(s - m * m, 0.0))

    def grad(self, w) -> FloatArray:
        m, s, x = self.moments(w)
        pu = self.p * self.u
        c2 = self.c**2
        if self.two_sided:
            return 2.0 * (1.0 + c2) * m * pu - 2.0 * c2 * pu * x
        var = max(s - m * m, 0.0)
        if var <= 0.0:
            return pu.copy()
        return pu - self.c * (pu * x - m * pu) / math.sqrt(var)

    def scale(self, box: WeightBox) -> float:
        """Typical magnitude of ``value`` on the box, for normalisation."""
        mid = np.full(self.u.shape, 0.5 * (box.lo + box.hi))
        _, s, _ = self.moments(mid)
        if self.two_sided:
            return max(self.c**2 * s, 1e-300)
        return max(math.sqrt(s), 1e-300)


def _critical(alpha_share: float, n: int, two_sided: bool) -> float:
    a = alpha_share / 2 if two_sided else alpha_share
    return z_upper(a) / math.sqrt(n)


def build_relaxed_constraint(c: AuxConstraint, table: SupportTable, box: WeightBox,
                             n: int | None = None) -> RelaxedConstraint:
    """Relaxed sample version of one auxiliary constraint."""
    n = table.n if n is None else n
    if not 0.0 < c.alpha_share < 1.0:
        raise ValueError("alpha_share must lie in (0, 1)")
    K = table.K
    if c.kind is ConstraintKind.RESPONSE_RATE:
        if c.r is None or not 0.0 < c.r <= 1.0:
            raise ValueError("response rate must lie in (0, 1]")
        target = 1.0 / c.r
        if not box.lo - 1e-12 <= target <= box.hi + 1e-12:
            raise InfeasibleByConstruction(
                f"inverse response rate {target:.6g} lies outside the weight box "
                f"[{box.lo:.6g}, {box.hi:.6g}]"
            )
        return RelaxedConstraint(np.ones(K), np.full(K, -target), table.phat,
                                 _critical(c.alpha_share, n, True), True, "response_rate")
    if c.kind is ConstraintKind.COVARIATE_MEAN:
        if c.column is None or c.qbar is None:
            raise ValueError("covariate-mean constraint needs a column and a population mean")
        q = table.column(c.column)
        return RelaxedConstraint(q - c.qbar, np.zeros(K), table.phat,
                                 _critical(c.alpha_share, n, True), True, f"mean({c.column})")
    if c.kind is ConstraintKind.GENERIC_LINEAR_MOMENT:
        cols = {k: table.t[:, j] for j, k in enumerate(table.column_names)}
        H = np.broadcast_to(np.asarray(c.H(cols), dtype=float), (K,)).copy()
        return RelaxedConstraint(H, np.zeros(K), table.phat,
                                 _critical(c.alpha_share, n, False), False, "moment")
    raise ValueError(f"unknown constraint kind {c.kind}")


@dataclass(frozen=True)
class SolverOptions:
    n_starts: int = 16
    kkt_tol: float = 1e-7
    feas_tol: float = 1e-9  # on normalised constraint values
    max_outer: int = 40
    seed: int = 0


@dataclass(frozen=True)
class ConstrainedInterval:
    beta_lo: float
    beta_hi: float
    w_lo: FloatArray
    w_hi: FloatArray
    alpha1: float
    alpha2: float
    solver_diagnostics: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.beta_hi - self.beta_lo


class _Problem:
    """Ratio objective and normalised constraints on the box."""

    def __init__(self, table: SupportTable, box: WeightBox, cons: Sequence[RelaxedConstraint]):
        self.table, self.box, self.cons = table, box, list(cons)
        self.fp = table.f * table.phat
        self.gp = table.g * table.phat
        self.scales = np.array([c.scale(box) for c in self.cons])

    def beta(self, w):
        return float(w @ self.fp) / float(w @ self.gp)

    def beta_grad(self, w):
        d = float(w @ self.gp)
        b = float(w @ self.fp) / d
        return b, (self.fp - b * self.gp) / d

    def cvals(self, w):
        return np.array([c.value(w) for c in self.cons]) / self.scales

    def cgrads(self, w):
        return [c.grad(w) / s for c, s in zip(self.cons, self.scales)]

    def violation(self, w):
        return float(np.max(np.maximum(self.cvals(w), 0.0), initial=0.0))


def _lbfgsb(fun, x0, bounds, maxiter=500):
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-12, "maxcor": 20})
    return res.x, res


def _restore(prob: _Problem, w0, bounds):
    """Minimise total squared violation starting from ``w0``."""

    def fun(w):
        cv = prob.cvals(w)
        pos = np.maximum(cv, 0.0)
        g = np.zeros_like(w)
        for pj, gj in zip(pos, prob.cgrads(w)):
            if pj > 0:
                g += 2.0 * pj * gj
        return float(pos @ pos), g

    w, _ = _lbfgsb(fun, w0, bounds)
    return w


def _kkt_residual(prob: _Problem, w, lam, sign):
    _, gb = prob.beta_grad(w)
    g = -sign * gb
    for lj, gj in zip(lam, prob.cgrads(w)):
        g = g + lj * gj
    proj = np.clip(w - g, prob.box.lo, prob.box.hi)
    stat = float(np.max(np.abs(proj - w)))
    cv = prob.cvals(w)
    comp = float(np.max(np.abs(lam * cv), initial=0.0))
    return max(stat, comp)


def _augmented_lagrangian(prob: _Problem, w0, sign: float, opts: SolverOptions, bounds):
    """Optimise ``sign * beta`` subject to the constraints; returns (w, lam, kkt, feasible)."""
    J = len(prob.cons)
    lam = np.zeros(J)
    rho = 10.0
    w = np.asarray(w0, dtype=float)
    # objective gradients are O(p_k) per coordinate; scale the objective to O(1)
    obj_scale = 1.0 / max(float(np.max(np.abs(prob.beta_grad(w)[1]))), 1e-12)
    prev_viol = np.inf
    kkt = np.inf
    for _ in range(opts.max_outer):
        def fun(x, lam=lam, rho=rho):
            b, gb = prob.beta_grad(x)
            val = -sign * b * obj_scale
            grad = -sign * gb * obj_scale
            for lj, cj, gj in zip(lam, prob.cvals(x), prob.cgrads(x)):
                t = cj + lj / rho
                if t > 0:
                    val += 0.5 * rho * (t * t - (lj / rho) ** 2)
                    grad = grad + rho * t * gj
                else:
                    val -= 0.5 * lj * lj / rho
            return val, grad

        w, _ = _lbfgsb(fun, w, bounds)
        cv = prob.cvals(w)
        lam = np.maximum(0.0, lam + rho * cv)
        viol = float(np.max(np.maximum(cv, 0.0), initial=0.0))
        kkt = _kkt_residual(prob, w, lam / obj_scale, sign)
        if viol <= opts.feas_tol and kkt <= opts.kkt_tol:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, 1e12)
        prev_viol = viol
    return w, lam / obj_scale, kkt, prob.violation(w) <= opts.feas_tol


def _linearised_start(prob: _Problem, sign: float, deltas) -> FloatArray | None:
    """Ratio optimum over the box with each moment pinned to ``|m_j(w)| <= delta_j``.

    Solved exactly as a linear program after the Charnes-Cooper substitution
    ``z = t w``; the result is a near-vertex point that is a good start for the
    nonlinear solve.
    """
    box, K = prob.box, prob.table.K
    # variables (z_1..z_K, t); maximise sign * fp.z  s.t. gp.z = 1
    cost = np.concatenate([-sign * prob.fp, [0.0]])
    A_eq = np.concatenate([prob.gp, [0.0]])[None, :]
    eye = np.eye(K)
    rows = [np.hstack([eye, -box.hi * np.ones((K, 1))]), np.hstack([-eye, box.lo * np.ones((K, 1))])]
    rhs = [np.zeros(K), np.zeros(K)]
    for con, d in zip(prob.cons, deltas):
        pu = con.p * con.u
        pv = float(np.sum(con.p * con.v))
        if con.two_sided:
            rows.append(np.concatenate([pu, [pv - d]])[None, :])
            rows.append(np.concatenate([-pu, [-pv - d]])[None, :])
            rhs += [np.zeros(1), np.zeros(1)]
        else:
            rows.append(np.concatenate([pu, [pv - d]])[None, :])
            rhs.append(np.zeros(1))
    res = linprog(cost, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(None, None)] * K + [(0, None)], method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        return None
    return np.clip(res.x[:K] / res.x[-1], box.lo, box.hi)


def _starts(prob: _Problem, sign: float, aux, unconstrained, opts: SolverOptions):
    table, box = prob.table, prob.box
    K = table.K
    starts = []
    # moments pinned at zero, and at the relaxation width seen at two reference points
    mid = np.full(K, 0.5 * (box.lo + box.hi))
    for ref in (None, mid, unconstrained.w_hi if sign > 0 else unconstrained.w_lo):
        if ref is None:
            deltas = [0.0] * len(prob.cons)
        else:
            deltas = [con.c * math.sqrt(max(con.moments(ref)[1] - con.moments(ref)[0] ** 2, 0.0))
                      for con in prob.cons]
        w = _linearised_start(prob, sign, deltas)
        if w is not None:
            starts.append(w)
    starts += [unconstrained.w_hi, unconstrained.w_lo]
    rate = next((c.r for c in aux if c.kind is ConstraintKind.RESPONSE_RATE), None)
    starts.append(np.full(K, 1.0 / rate) if rate else mid)
    rng = np.random.default_rng(opts.seed)
    while len(starts) < opts.n_starts:
        starts.append(rng.uniform(box.lo, box.hi, size=K))
    return starts[: max(opts.n_starts, 1)]


def solve_constrained_bounds(table: SupportTable, box: WeightBox, constraints: Sequence[AuxConstraint],
                             alpha1: float | None = None, alpha2: float = 0.05,
                             options: SolverOptions | None = None) -> ConstrainedInterval:
    """Bounds of the weighted ratio over the box intersected with the relaxed constraints.

    The quadratic constraints are nonconvex, so this is a multi-start local method:
    every start is first moved to a feasible point (if it is not one), then an
    augmented Lagrangian with box-constrained inner solves is run for the maximum
    and the minimum.  The best feasible result wins; ties go to the earliest start.
    """
    opts = options or SolverOptions()
    shares = sum(c.alpha_share for c in constraints)
    if alpha1 is None:
        alpha1 = shares
    elif constraints and abs(shares - alpha1) > 1e-12:
        raise ValueError(f"constraint alpha shares sum to {shares}, expected alpha1={alpha1}")
    unconstrained = solve_bounds(table, box)
    if not constraints:
        return ConstrainedInterval(unconstrained.beta_lo, unconstrained.beta_hi, unconstrained.w_lo,
                                   unconstrained.w_hi, 0.0, alpha2,
                                   {"restarts": 0, "best_kkt_residual": 0.0, "feasibility_slacks": []})
    relaxed = [build_relaxed_constraint(c, table, box) for c in constraints]
    prob = _Problem(table, box, relaxed)
    bounds = [(box.lo, box.hi)] * table.K

    results = {}
    restarts = 0
    for sign, name, w_unc in ((1.0, "hi", unconstrained.w_hi), (-1.0, "lo", unconstrained.w_lo)):
        if prob.violation(w_unc) <= 0.0:
            # the unconstrained optimum is feasible, hence optimal
            results[name] = (sign * prob.beta(w_unc), w_unc, 0.0)
            continue
        best = None
        reached = False
        for i, w0 in enumerate(_starts(prob, sign, constraints, unconstrained, opts)):
            restarts += 1
            w0 = np.asarray(w0, dtype=float)
            if prob.violation(w0) > opts.feas_tol:
                w0 = _restore(prob, w0, bounds)
                if prob.violation(w0) > opts.feas_tol:
                    continue
            reached = True
            w, lam, kkt, feasible = _augmented_lagrangian(prob, w0, sign, opts, bounds)
            if not feasible:
                continue
            score = sign * prob.beta(w)
            if best is None or score > best[0] + 1e-13 * max(1.0, abs(score)):
                best = (score, w, kkt)
        if best is None and reached:
            raise NonConvergence(f"no feasible start ended feasible for the {name} bound")
        if best is None:
            raise InfeasibleConstraints(
                "no start reached the relaxed constraint set; the auxiliary information "
                "may be incompatible with the weight box"
            )
        results[name] = best

    beta_hi = evaluate(table, results["hi"][1])
    beta_lo = evaluate(table, results["lo"][1])
    kkt = max(results["hi"][2], results["lo"][2])
    diagnostics = {
        "restarts": restarts,
        "best_kkt_residual": kkt,
        "feasibility_slacks": {
            "lo": [-c.value(results["lo"][1]) for c in relaxed],
            "hi": [-c.value(results["hi"][1]) for c in relaxed],
        },
        "converged": kkt <= opts.kkt_tol,
    }
    return ConstrainedInterval(beta_lo, beta_hi, results["lo"][1], results["hi"][1],
                               alpha1, alpha2, diagnostics)


def theorem3_ci(ci: ConstrainedInterval, table: SupportTable, alpha1: float | None = None,
                alpha2: float | None = None) -> AsymptoticCI:
    """Widen the constrained bounds at level ``alpha2``.

    The result covers the population constrained interval with asymptotic
    probability at least ``1 - alpha1 - alpha2``, where ``alpha1`` was spent on
    the feasibility of the relaxed constraint set.
    """
    alpha1 = ci.alpha1 if alpha1 is None else alpha1
    alpha2 = ci.alpha2 if alpha2 is None else alpha2
    if not (alpha2 > 0 and alpha1 >= 0 and alpha1 + alpha2 < 1):
        raise ValueError("need alpha1 >= 0, alpha2 > 0 and alpha1 + alpha2 < 1")
    n = table.n
    se_lo = math.sqrt(sigma_hat(table, ci.w_lo, None, ci.beta_lo) / n)
    se_hi = math.sqrt(sigma_hat(table, ci.w_hi, None, ci.beta_hi) / n)
    z = z_upper(alpha2 / 2)
    return AsymptoticCI(ci.beta_lo - z * se_lo, ci.beta_hi + z * se_hi, alpha2, se_lo, se_hi, n)


@dataclass(frozen=True)
class ConstraintProblem:
    """Data, box and auxiliary constraints; the alpha shares are rescaled per split."""

    table: SupportTable
    box: WeightBox
    constraints: tuple[AuxConstraint, ...]
    options: SolverOptions = SolverOptions()

    def with_alpha1(self, alpha1: float) -> tuple[AuxConstraint, ...]:
        total = sum(c.alpha_share for c in self.constraints)
        return tuple(replace(c, alpha_share=alpha1 * c.alpha_share / total) for c in self.constraints)

    def solve(self, alpha1: float, alpha2: float) -> tuple[ConstrainedInterval, AsymptoticCI]:
        """Constrained bounds and widened interval; ``alpha1 = 0`` drops the constraints."""
        cons = self.with_alpha1(alpha1) if alpha1 > 0 else ()
        ci = solve_constrained_bounds(self.table, self.box, cons, alpha1, alpha2, self.options)
        return ci, theorem3_ci(ci, self.table, alpha1, alpha2)


@dataclass(frozen=True)
class SplitResult:
    best: tuple[float, float]
    widths: tuple[float, ...]
    grid: tuple[tuple[float, float], ...]


def tune_alpha_split(problem: ConstraintProblem, total_alpha: float,
                     grid: Sequence[tuple[float, float]]) -> SplitResult:
    """Pick the ``(alpha1, alpha2)`` split with the narrowest widened interval.

    Every split must add up to ``total_alpha``; ties keep the earliest split.
    """
    grid = tuple((float(a1), float(a2)) for a1, a2 in grid)
    if not grid:
        raise ValueError("empty split grid")
    for a1, a2 in grid:
        if abs(a1 + a2 - total_alpha) > 1e-9:
            raise ValueError(f"split ({a1}, {a2}) does not add up to {total_alpha}")
    widths = []
    for a1, a2 in grid:
        _, aci = problem.solve(a1, a2)
        widths.append(aci.width)
    best = int(np.argmin(widths))
    return SplitResult(grid[best], tuple(widths), grid)
