"""Asymptotic confidence intervals and p-values for the identified interval."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .core import Estimand, IntervalEstimate, SupportTable, ZeroDenominator


@dataclass(frozen=True)
class AsymptoticCI:
    c_lo: float
    c_hi: float
    alpha: float
    se_lo: float
    se_hi: float
    n: int

    @property
    def width(self) -> float:
        return self.c_hi - self.c_lo

    def contains(self, lo: float, hi: float | None = None) -> bool:
        hi = lo if hi is None else hi
        return self.c_lo <= lo and hi <= self.c_hi


def z_upper(alpha: float) -> float:
    """Upper ``alpha`` quantile of the standard normal."""
    return float(norm.isf(alpha))


def sigma_hat(table: SupportTable, w, est: Estimand | None = None, beta_w: float | None = None) -> float:
    """Delta-method variance of the weighted ratio at fixed weights.

    ``sum_k p_k [w_k (f_k - beta g_k)]^2 / (sum_k p_k w_k g_k)^2``; multiply by
    ``1/n`` for the variance of the estimator itself.  ``est`` is accepted for
    signature symmetry; the per-cell ``f``/``g`` already encode it.
    """
    w = np.asarray(w, dtype=float)
    p = table.phat
    den = float(np.sum(p * w * table.g))
    if den == 0.0:
        raise ZeroDenominator("weighted denominator is zero")
    if beta_w is None:
        beta_w = float(np.sum(p * w * table.f)) / den
    resid = w * (table.f - beta_w * table.g)
    return float(np.sum(p * resid**2)) / den**2


def confidence_interval(ie: IntervalEstimate, table: SupportTable, est: Estimand | None = None,
                        alpha: float = 0.05) -> AsymptoticCI:
    """Two-sided ``1 - alpha`` interval for the identified set.

    Each endpoint is pushed out by ``z_{alpha/2}`` standard errors evaluated at
    its own optimising weights.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = table.n
    se_lo = math.sqrt(sigma_hat(table, ie.w_lo, est, ie.beta_lo) / n)
    se_hi = math.sqrt(sigma_hat(table, ie.w_hi, est, ie.beta_hi) / n)
    z = z_upper(alpha / 2)
    return AsymptoticCI(ie.beta_lo - z * se_lo, ie.beta_hi + z * se_hi, alpha, se_lo, se_hi, n)


def p_value_from_se(beta_lo: float, beta_hi: float, se_lo: float, se_hi: float, beta_tilde: float) -> float:
    """``Phi((beta_hi - b)/se_hi) - Phi((beta_lo - b)/se_lo)`` clamped to [0, 1].

    A zero standard error turns the matching term into a step, so with both
    errors zero the p-value is exactly 1 inside ``[beta_lo, beta_hi]`` and 0 outside.
    """
    upper = norm.cdf((beta_hi - beta_tilde) / se_hi) if se_hi > 0 else float(beta_tilde <= beta_hi)
    lower = norm.cdf((beta_lo - beta_tilde) / se_lo) if se_lo > 0 else float(beta_tilde < beta_lo)
    return min(1.0, max(0.0, float(upper - lower)))


def p_value(ie: IntervalEstimate, table: SupportTable, est: Estimand | None, beta_tilde: float) -> float:
    """p-value for ``H0: beta_tilde in [beta_lo, beta_hi]``.

    Close to one for hypothesised values well inside the estimated interval and
    decays to zero outside it; at an endpoint it is about one half.
    """
    n = table.n
    se_lo = math.sqrt(sigma_hat(table, ie.w_lo, est, ie.beta_lo) / n)
    se_hi = math.sqrt(sigma_hat(table, ie.w_hi, est, ie.beta_hi) / n)
    return p_value_from_se(ie.beta_lo, ie.beta_hi, se_lo, se_hi, beta_tilde)
