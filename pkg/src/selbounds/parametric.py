"""Bounds under a parametric selection model.

Inverse selection probabilities follow ``lambda_i = h(alpha_0 + alpha_1' D_i)`` with
``h(u) = 1 + exp(u)``.  The box ``[1/b, 1/a]`` on the weights becomes a polytope on the
coefficients: ``h^{-1}(1/b) <= alpha_0 + alpha_1' D_i <= h^{-1}(1/a)`` for every row.
The ratio is optimised over that polytope (intersected with optional sign
constraints) by multi-start SLSQP.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.spatial import ConvexHull, QhullError

from .core import (
    Estimand,
    FloatArray,
    ObservationSet,
    SelectionBoundsError,
    WeightBox,
    ZeroDenominator,
)

# Lower end of the linear index when 1/b = 1 (h^{-1}(1) is -inf): h(-30) - 1 ~ 1e-13.
INDEX_FLOOR = -30.0
MAX_COEFFICIENTS = 20


class InfeasiblePolytope(SelectionBoundsError):
    pass


class BoundaryLinkError(SelectionBoundsError):
    """The link cannot be inverted at a box endpoint."""


class NonConvergence(SelectionBoundsError):
    pass


class Link(enum.Enum):
    LOGIT = "logit"

    def h(self, u):
        return 1.0 + np.exp(u)

    def dh(self, u):
        return np.exp(u)

    def inverse(self, lam: float) -> float:
        if lam <= 1.0:
            raise BoundaryLinkError(f"logit link has no finite inverse at weight {lam}")
        return float(np.log(lam - 1.0))


class Sign(enum.Enum):
    FREE = "free"
    NONNEGATIVE = "nonnegative"
    NONPOSITIVE = "nonpositive"


@dataclass(frozen=True)
class ParametricFamily:
    """Selection model ``h(alpha_0 + alpha_1' D)`` over the named columns ``D``.

    ``sign_constraints`` has one entry per selection column (the intercept is
    always free); an empty tuple means all free.  An entry may also be a tuple of
    signs that all apply, so ``(NONNEGATIVE, NONPOSITIVE)`` pins a coefficient to zero.
    """

    selection_columns: tuple[str, ...] = ()
    sign_constraints: tuple[Sign, ...] = ()
    link: Link = Link.LOGIT

    def __post_init__(self):
        object.__setattr__(self, "selection_columns", tuple(self.selection_columns))
        signs = tuple(
            frozenset(Sign(x) for x in s) if isinstance(s, (tuple, list, set, frozenset))
            else frozenset((Sign(s),))
            for s in self.sign_constraints
        ) or (frozenset((Sign.FREE,)),) * self.d
        if len(signs) != self.d:
            raise ValueError(f"{len(signs)} sign constraints for {self.d} selection columns")
        object.__setattr__(self, "sign_constraints", signs)
        if self.d + 1 > MAX_COEFFICIENTS:
            raise ValueError(f"at most {MAX_COEFFICIENTS - 1} selection columns are supported")

    @property
    def d(self) -> int:
        return len(self.selection_columns)


@dataclass(frozen=True)
class AlphaPolytope:
    """``{alpha : A alpha <= b}``; rows of ``A`` are unit-free index constraints."""

    A: FloatArray
    b: FloatArray
    index_lo: float
    index_hi: float
    lower_vacuous: bool

    def slack(self, alpha) -> FloatArray:
        return self.b - self.A @ np.asarray(alpha, dtype=float)


@dataclass(frozen=True)
class ParametricInterval:
    beta_lo: float
    beta_hi: float
    alpha_lo: FloatArray
    alpha_hi: FloatArray
    diagnostics: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.beta_hi - self.beta_lo


def _design(obs: ObservationSet, family: ParametricFamily) -> FloatArray:
    if family.d == 0:
        return np.ones((obs.n, 1))
    return np.column_stack([np.ones(obs.n)] + [obs.column(c) for c in family.selection_columns])


def _extreme_rows(X: FloatArray) -> FloatArray:
    """Distinct design rows, reduced to the vertices of their convex hull when cheap."""
    X = np.unique(X, axis=0)
    d = X.shape[1] - 1
    if d == 1:
        return X[[np.argmin(X[:, 1]), np.argmax(X[:, 1])]] if X.shape[0] > 2 else X
    if 2 <= d <= 3 and X.shape[0] > d + 1:
        try:
            return X[ConvexHull(X[:, 1:]).vertices]
        except QhullError:  # flat point cloud; keep everything
            return X
    return X


def feasible_alpha_polytope(obs: ObservationSet, box: WeightBox, family: ParametricFamily,
                            strict_boundary: bool = False) -> AlphaPolytope:
    """Linear system on ``alpha`` implied by the weight box and the sign constraints.

    A linear index is bounded on a finite point set exactly when it is bounded on the
    vertices of its convex hull, so only those rows are kept (duplicates drop out).
    When ``1/b = 1`` the lower index bound is ``-inf``; it is replaced by
    ``INDEX_FLOOR`` unless ``strict_boundary`` asks for an error instead.
    """
    link = family.link
    hi = link.inverse(box.hi) if box.hi > 1.0 else None
    if hi is None:
        raise InfeasiblePolytope("weight box [1, 1] is outside the image of the link")
    vacuous = box.lo <= 1.0
    if vacuous:
        if strict_boundary:
            raise BoundaryLinkError("1/b = 1 has no finite preimage under the logit link")
        lo = INDEX_FLOOR
    else:
        lo = link.inverse(box.lo)
    X = _extreme_rows(_design(obs, family))
    rows = [X, -X]
    rhs = [np.full(X.shape[0], hi), np.full(X.shape[0], -lo)]
    for j, signs in enumerate(family.sign_constraints, start=1):
        for s in signs - {Sign.FREE}:
            e = np.zeros(family.d + 1)
            e[j] = -1.0 if s is Sign.NONNEGATIVE else 1.0
            rows.append(e[None])
            rhs.append(np.zeros(1))
    return AlphaPolytope(np.vstack(rows), np.concatenate(rhs), lo, hi, vacuous)


def chebyshev_center(poly: AlphaPolytope, bound: float = 1e6) -> tuple[FloatArray, float]:
    """Centre and radius of the largest ball inside the polytope (``bound`` caps |alpha_j|)."""
    A, b = poly.A, poly.b
    norms = np.linalg.norm(A, axis=1)
    p = A.shape[1]
    c = np.zeros(p + 1)
    c[-1] = -1.0
    res = linprog(
        c, A_ub=np.column_stack([A, norms]), b_ub=b,
        bounds=[(-bound, bound)] * p + [(0, None)], method="highs",
    )
    if res.status != 0:
        raise InfeasiblePolytope(f"coefficient polytope is empty ({res.message})")
    return res.x[:p], float(res.x[-1])


def _ray_length(poly: AlphaPolytope, x: FloatArray, direction: FloatArray) -> float:
    ad = poly.A @ direction
    sl = poly.slack(x)
    with np.errstate(divide="ignore"):
        t = np.where(ad > 0, sl / ad, np.inf)
    return float(min(t.min(), 1e6))


class _Objective:
    """Ratio over design-row groups: ``sum h(x_j' alpha) F_j / sum h(x_j' alpha) G_j``."""

    def __init__(self, X, F, G, link: Link, sign: float, u_max: float):
        self.X, self.F, self.G, self.link, self.sign = X, F, G, link, sign
        # SLSQP may probe outside the polytope; capping the index there avoids overflow
        self.u_max = u_max

    def _index(self, alpha):
        return np.minimum(self.X @ alpha, self.u_max)

    def value(self, alpha):
        lam = self.link.h(self._index(alpha))
        return float(lam @ self.F / (lam @ self.G))

    def fun(self, alpha):
        u = self._index(alpha)
        lam = self.link.h(u)
        num, den = lam @ self.F, lam @ self.G
        beta = num / den
        grad = self.X.T @ (self.link.dh(u) * (self.F - beta * self.G)) / den
        return self.sign * beta, self.sign * grad


def _group_rows(X: FloatArray, fv: FloatArray, gv: FloatArray):
    Xu, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    return Xu, np.bincount(inv, fv, Xu.shape[0]), np.bincount(inv, gv, Xu.shape[0])


def _project(poly: AlphaPolytope, x: FloatArray, center: FloatArray) -> FloatArray:
    """Pull ``x`` toward ``center`` until every half-space holds."""
    sl = poly.slack(x)
    if np.all(sl >= 0):
        return x
    d = x - center
    ad = poly.A @ d
    sc = poly.slack(center)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ad > 0, sc / ad, np.inf)
    return center + min(1.0, float(t.min())) * d


def solve_parametric_bounds(obs: ObservationSet, est: Estimand, box: WeightBox,
                            family: ParametricFamily, n_starts: int = 32,
                            seed: int = 0) -> ParametricInterval:
    """Lower and upper bound of the estimand over the parametric weight family.

    The objective is evaluated at the row level (rows sharing a design vector are
    summed, which is exact).  Each bound is the best of ``n_starts`` SLSQP runs from
    the Chebyshev centre, the vertices that optimise the objective's linearisation
    there, and random points on rays from the centre.  The problem is nonconvex, so
    this is a best-found optimum; results are deterministic for a given ``seed``.
    """
    for c in family.selection_columns:
        obs.column(c)
    poly = feasible_alpha_polytope(obs, box, family)
    fv, gv = est.evaluate_rows(obs.as_mapping())
    X, F, G = _group_rows(_design(obs, family), fv, gv)
    # same orientation rule as the nonparametric program: the denominator may not
    # change sign anywhere on the weight box
    dmin = np.sum(np.where(G > 0, box.lo, box.hi) * G)
    dmax = np.sum(np.where(G > 0, box.hi, box.lo) * G)
    if not (dmin > 0 or dmax < 0):
        raise ZeroDenominator(
            f"weighted denominator ranges over [{dmin:.6g}, {dmax:.6g}] on the box"
        )
    center, radius = chebyshev_center(poly)
    p = X.shape[1]
    rng = np.random.default_rng(seed)
    cons = [{"type": "ineq", "fun": poly.slack, "jac": lambda a: -poly.A}]
    out = {}
    restarts = 0
    for name, sign in (("hi", -1.0), ("lo", 1.0)):
        obj = _Objective(X, F, G, family.link, sign, poly.index_hi + 30.0)
        starts = [center]
        if radius > 0:
            _, grad = obj.fun(center)
            res = linprog(grad, A_ub=poly.A, b_ub=poly.b, bounds=[(None, None)] * p, method="highs")
            if res.status == 0:
                starts.append(res.x)
        while len(starts) < n_starts and radius > 0:
            d = rng.standard_normal(p)
            d /= np.linalg.norm(d)
            starts.append(center + rng.uniform(0.1, 1.0) * _ray_length(poly, center, d) * d)
        best_x, best_v, n_ok = center, obj.value(center), 0
        for x0 in starts:
            res = minimize(obj.fun, x0, jac=True, method="SLSQP", constraints=cons,
                           options={"maxiter": 500, "ftol": 1e-12})
            restarts += 1
            x = _project(poly, res.x, center)
            v = obj.value(x)
            if np.isfinite(v):
                n_ok += 1
                if sign * v < sign * best_v:
                    best_x, best_v = x, v
        if n_ok == 0:
            raise NonConvergence(f"no start produced a finite {name} bound")
        out[name] = (best_v, best_x)
    (b_lo, a_lo), (b_hi, a_hi) = out["lo"], out["hi"]
    slack = np.minimum(poly.slack(a_lo), poly.slack(a_hi))
    active = int(np.sum(np.abs(poly.slack(a_hi)) <= 1e-7) + np.sum(np.abs(poly.slack(a_lo)) <= 1e-7))
    return ParametricInterval(
        b_lo, b_hi, a_lo, a_hi,
        {"restarts": restarts, "active_constraints": active, "min_slack": float(slack.min()),
         "lower_index_vacuous": poly.lower_vacuous},
    )
