"""Estimands, observation sets, support collapsing and the weighted ratio estimator."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
ColumnFn = Callable[[Mapping[str, np.ndarray]], np.ndarray]

# Fraction of rows that are singleton cells above which we warn that the
# support looks continuous.
CONTINUOUS_WARN_RATIO = 0.9


class SelectionBoundsError(Exception):
    """Base class for estimation errors raised by this package."""


class EmptyInput(SelectionBoundsError):
    pass


class NonFiniteEvaluation(SelectionBoundsError):
    def __init__(self, row: int, which: str = "f/g"):
        super().__init__(f"{which} is not finite at row {row}")
        self.row = row


class ZeroDenominator(SelectionBoundsError):
    """The weighted denominator vanishes (or changes sign) somewhere on the box."""


class ContinuousSupportWarning(UserWarning):
    pass


class EstimandKind(enum.Enum):
    MEAN = "mean"
    OLS = "ols"
    IV = "iv"
    CUSTOM = "custom"


@dataclass(frozen=True)
class Estimand:
    """A ratio estimand ``beta = E[lambda f(T)] / E[lambda g(T)]``.

    ``f`` and ``g`` are vectorised: they receive a mapping from column name
    to a 1-D array and return one value per row.
    """

    kind: EstimandKind
    f: ColumnFn
    g: ColumnFn
    columns: tuple[str, ...] = ()

    @classmethod
    def mean(cls, y: str = "y") -> "Estimand":
        return cls(
            EstimandKind.MEAN,
            lambda c: np.asarray(c[y], dtype=float),
            lambda c: np.ones_like(np.asarray(c[y], dtype=float)),
            (y,),
        )

    @classmethod
    def ols(cls, x: str = "x", y: str = "y") -> "Estimand":
        # no-intercept regression slope
        return cls(
            EstimandKind.OLS,
            lambda c: np.asarray(c[x], dtype=float) * np.asarray(c[y], dtype=float),
            lambda c: np.asarray(c[x], dtype=float) ** 2,
            (x, y),
        )

    @classmethod
    def iv(cls, z: str = "z", x: str = "x", y: str = "y") -> "Estimand":
        return cls(
            EstimandKind.IV,
            lambda c: np.asarray(c[z], dtype=float) * np.asarray(c[y], dtype=float),
            lambda c: np.asarray(c[z], dtype=float) * np.asarray(c[x], dtype=float),
            (z, x, y),
        )

    @classmethod
    def custom(cls, f: ColumnFn, g: ColumnFn, columns: Sequence[str] = ()) -> "Estimand":
        return cls(EstimandKind.CUSTOM, f, g, tuple(columns))

    def evaluate_rows(self, columns: Mapping[str, np.ndarray]) -> tuple[FloatArray, FloatArray]:
        """Evaluate ``f`` and ``g`` on every row; raise on the first non-finite value."""
        n = len(next(iter(columns.values())))
        fv = np.broadcast_to(np.asarray(self.f(columns), dtype=float), (n,)).copy()
        gv = np.broadcast_to(np.asarray(self.g(columns), dtype=float), (n,)).copy()
        for name, arr in (("f", fv), ("g", gv)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise NonFiniteEvaluation(int(bad[0]), name)
        return fv, gv


@dataclass(frozen=True)
class ObservationSet:
    """The selected sample: ``n`` rows of ``t`` numeric columns."""

    rows: FloatArray
    column_names: tuple[str, ...]

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise EmptyInput("observation set has no rows")
        if rows.shape[0] < 2:
            raise EmptyInput("need at least two observations")
        if len(self.column_names) != rows.shape[1]:
            raise ValueError(
                f"{len(self.column_names)} column names for {rows.shape[1]} columns"
            )
        if np.isnan(rows).any():
            r = int(np.flatnonzero(np.isnan(rows).any(axis=1))[0])
            raise ValueError(f"missing value in row {r}; resolve missing data upstream")
        rows = rows + 0.0  # -0.0 -> 0.0 so that equal values share a bit pattern
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @classmethod
    def from_columns(cls, **cols: Sequence[float]) -> "ObservationSet":
        names = tuple(cols)
        return cls(np.column_stack([np.asarray(cols[k], dtype=float) for k in names]), names)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def column(self, name: str) -> FloatArray:
        try:
            return self.rows[:, self.column_names.index(name)]
        except ValueError:
            raise KeyError(f"no column named {name!r}") from None

    def as_mapping(self) -> dict[str, FloatArray]:
        return {k: self.rows[:, j] for j, k in enumerate(self.column_names)}

    def take(self, idx: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.rows[idx], self.column_names)

    def select(self, names: Sequence[str]) -> "ObservationSet":
        return ObservationSet(np.column_stack([self.column(k) for k in names]), tuple(names))


@dataclass(frozen=True)
class SupportTable:
    """Observations collapsed onto their distinct values ``t_k``.

    Attributes
    ----------
    t : (K, t) array of distinct rows
    count : (K,) number of observations per cell
    phat : (K,) empirical mass ``count / n``
    f, g : (K,) estimand functions evaluated at each cell
    inverse : (n,) cell index of every original row, when built from data
    """

    t: FloatArray
    count: npt.NDArray[np.int64]
    phat: FloatArray
    f: FloatArray
    g: FloatArray
    column_names: tuple[str, ...] = ()
    inverse: npt.NDArray[np.int64] | None = field(default=None, repr=False)

    def __post_init__(self):
        # Ratios are scale free, so when the masses are exactly count / n the
        # integer counts are used as masses in ratio evaluation (no 1/n rounding).
        counts = self.count.astype(float)
        exact = np.array_equal(counts / counts.sum(), self.phat)
        object.__setattr__(self, "ratio_mass", counts if exact else self.phat)

    @property
    def K(self) -> int:
        return self.f.shape[0]

    @property
    def n(self) -> int:
        return int(self.count.sum())

    @classmethod
    def from_arrays(cls, f, g, phat=None, count=None, n=None, t=None) -> "SupportTable":
        """Build a table from per-cell values rather than raw data.

        Masses come from ``count`` if given, else ``phat``, else uniform.  Without
        ``count`` the sample size is ``n`` (default ``K``), which only matters for
        inference.
        """
        f = np.atleast_1d(np.asarray(f, dtype=float))
        g = np.atleast_1d(np.asarray(g, dtype=float))
        K = f.shape[0]
        if g.shape != f.shape:
            raise ValueError("f and g must have the same length")
        if count is not None:
            count = np.asarray(count, dtype=np.int64)
            phat = count / count.sum() if phat is None else np.asarray(phat, dtype=float)
        else:
            phat = np.full(K, 1.0 / K) if phat is None else np.asarray(phat, dtype=float)
            count = np.maximum(np.round(phat * (K if n is None else n)), 1).astype(np.int64)
        if np.any(phat <= 0) or abs(phat.sum() - 1.0) > 1e-12:
            raise ValueError("cell masses must be positive and sum to one")
        if t is None:
            t = np.arange(K, dtype=float)[:, None]
        return cls(np.asarray(t, dtype=float), count, phat, f, g)

    def column(self, name: str) -> FloatArray:
        return self.t[:, self.column_names.index(name)]


@dataclass(frozen=True)
class WeightBox:
    """Inverse selection probabilities are confined to ``[1/b, 1/a]``."""

    a: float
    b: float

    def __post_init__(self):
        if not (0.0 < self.a <= self.b <= 1.0):
            raise ValueError(f"need 0 < a <= b <= 1, got a={self.a}, b={self.b}")

    @property
    def lo(self) -> float:
        return 1.0 / self.b

    @property
    def hi(self) -> float:
        return 1.0 / self.a

    @classmethod
    def from_weights(cls, lo: float, hi: float) -> "WeightBox":
        return cls(1.0 / hi, 1.0 / lo)


@dataclass(frozen=True)
class IntervalEstimate:
    beta_lo: float
    beta_hi: float
    w_lo: FloatArray
    w_hi: FloatArray
    degenerate_cells_lo: tuple[int, ...] = ()
    degenerate_cells_hi: tuple[int, ...] = ()

    @property
    def width(self) -> float:
        return self.beta_hi - self.beta_lo


def _row_keys(rows: FloatArray) -> np.ndarray:
    """One hashable/sortable key per row, equal iff the rows are bit-identical."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.shape[1] == 1:
        return rows[:, 0].view(np.uint64)
    return rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1])))[:, 0]


def collapse_support(obs: ObservationSet, est: Estimand, warn_continuous: bool = True) -> SupportTable:
    """Group identical rows into support cells with empirical masses.

    A ``ContinuousSupportWarning`` is issued when nearly every row is distinct,
    unless ``warn_continuous`` is false.
    """
    if obs.n == 0:
        raise EmptyInput("no observations")
    fv, gv = est.evaluate_rows(obs.as_mapping())
    keys = _row_keys(obs.rows)
    _, first, inverse, count = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    K = first.shape[0]
    if warn_continuous and K / obs.n > CONTINUOUS_WARN_RATIO and obs.n >= 20:
        warnings.warn(
            f"{K} distinct rows out of {obs.n}: support looks continuous, "
            "each row is treated as its own cell",
            ContinuousSupportWarning,
            stacklevel=2,
        )
    return SupportTable(
        t=obs.rows[first],
        count=count.astype(np.int64),
        phat=count / obs.n,
        f=fv[first],
        g=gv[first],
        column_names=obs.column_names,
        inverse=inverse.reshape(-1).astype(np.int64),
    )


def evaluate(table: SupportTable, w) -> float:
    """Weighted ratio ``sum w f p / sum w g p``."""
    w = np.asarray(w, dtype=float)
    if w.shape != (table.K,):
        raise ValueError(f"weight vector has shape {w.shape}, expected ({table.K},)")
    m = table.ratio_mass
    den = np.sum(w * table.g * m)
    if den == 0.0 or not np.isfinite(den):
        raise ZeroDenominator(f"weighted denominator is {den}")
    return float(np.sum(w * table.f * m) / den)


def denominator_range(table: SupportTable, box: WeightBox) -> tuple[float, float]:
    """Smallest and largest value of ``sum w g p`` over the box."""
    gp = table.g * table.phat
    dmin = np.sum(np.where(gp > 0, box.lo, box.hi) * gp)
    dmax = np.sum(np.where(gp > 0, box.hi, box.lo) * gp)
    return float(dmin), float(dmax)
