"""Monte-Carlo experiments: bias, coverage, power, sampling distribution, constraints.

Every replicate draws from its own random stream keyed by
``(seed, experiment, n, replicate)``, so tables do not depend on the number of
worker threads or on the order in which replicates finish.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml
from scipy import sparse, stats
from scipy.optimize import linprog

from .bootstrap import bootstrap_table
from .constraints import (
    AuxConstraint,
    ConstraintProblem,
    LevelConvention,
    SolverOptions,
    to_significance,
)
from .core import (
    Estimand,
    IntervalEstimate,
    ObservationSet,
    SupportTable,
    WeightBox,
    collapse_support,
)
from .inference import confidence_interval, p_value, sigma_hat
from .lfp import solve_bounds

# stream ids, one per experiment kind
_POPULATION, _BIAS, _COVERAGE, _POWER, _SAMPLING, _CONSIM, _SPLIT = range(7)
_BINOM_TRIALS = 100


class Generator(enum.Enum):
    STD_NORMAL_MEAN = "std_normal_mean"
    BINOMIAL_SUM_CONSTRAINT = "binomial_sum_constraint"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ExperimentSpec:
    """One simulation design.

    ``N_population`` rows are drawn once; replicates subsample ``n`` of them without
    replacement.  The binomial-sum design samples i.i.d. from its (known) law instead,
    so ``N_population`` is ignored there.  For ``Generator.CUSTOM`` supply ``draw``,
    a function ``(rng, size) -> ObservationSet``, and ``estimand``.
    """

    generator: Generator = Generator.STD_NORMAL_MEAN
    N_population: int = 1_000_000
    n_grid: tuple[int, ...] = (100, 500, 2000)
    replicates: int = 1000
    box: WeightBox = WeightBox(0.1, 1.0)
    alpha: float = 0.05
    seed: int = 0
    outputs: tuple[str, ...] = ("bias", "coverage", "power", "histogram")
    bootstrap_R: int = 500
    coverage_n: tuple[int, ...] = (2000,)
    coverage_methods: tuple[str, ...] = ("asymptotic", "bootstrap")
    power_n: int = 100
    beta_tilde_grid: tuple[float, ...] = tuple(np.round(np.arange(-2.0, 2.0001, 0.25), 10))
    histogram_n: int = 100
    histogram_replicates: int = 2000
    histogram_bins: int = 40
    # constraint design
    qbar: float = 0.5
    constraint_n: int = 1000
    alpha1: float = 0.02
    alpha2: float = 0.03
    level_convention: LevelConvention = LevelConvention.SIGNIFICANCE
    split_grid: tuple[float, ...] = tuple(np.round(np.linspace(0.0005, 0.0495, 10), 10))
    split_replicates: int = 25
    solver_starts: int = 4
    threads: int = 1
    draw: Callable | None = field(default=None, compare=False, repr=False)
    estimand: Estimand | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "generator", Generator(self.generator))
        object.__setattr__(self, "level_convention", LevelConvention(self.level_convention))
        for name in ("n_grid", "outputs", "coverage_n", "coverage_methods", "beta_tilde_grid", "split_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.replicates < 100:
            raise ValueError("replicates must be at least 100")
        if self.generator is Generator.STD_NORMAL_MEAN:
            big = max(self.n_grid + self.coverage_n + (self.power_n, self.histogram_n))
            if big > self.N_population:
                raise ValueError(f"n = {big} exceeds N_population = {self.N_population}")
        if self.generator is Generator.CUSTOM and (self.draw is None or self.estimand is None):
            raise ValueError("a custom generator needs draw and estimand")

    @property
    def significance(self) -> tuple[float, float]:
        """``(alpha1, alpha2)`` as significance levels whatever the configured convention."""
        return (to_significance(self.alpha1, self.level_convention),
                to_significance(self.alpha2, self.level_convention))

    def echo(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("draw", "estimand")}
        d["generator"] = self.generator.value
        d["level_convention"] = self.level_convention.value
        d["box"] = {"a": self.box.a, "b": self.box.b}
        return _plain(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def _collapse(obs: ObservationSet, est: Estimand) -> SupportTable:
    # simulated data are continuous by design; warnings.catch_warnings is not thread-safe
    return collapse_support(obs, est, warn_continuous=False)


# ---------------------------------------------------------------- data generation

def _estimand(spec: ExperimentSpec) -> Estimand:
    if spec.generator is Generator.CUSTOM:
        return spec.estimand
    return Estimand.mean("y")


@lru_cache(maxsize=4)
def _normal_population(seed: int, N: int) -> np.ndarray:
    y = stream(seed, _POPULATION).standard_normal(N)
    y.setflags(write=False)
    return y


def _binomial_sample(rng: np.random.Generator, n: int) -> ObservationSet:
    q = (rng.binomial(_BINOM_TRIALS, 0.5, n) - 50) / 5.0
    e = (rng.binomial(_BINOM_TRIALS, 0.5, n) - 50) / 5.0
    return ObservationSet.from_columns(q=q, y=q + e)


def population(spec: ExperimentSpec) -> ObservationSet:
    """The finite population draw from which replicates are subsampled."""
    if spec.generator is Generator.STD_NORMAL_MEAN:
        return ObservationSet.from_columns(y=_normal_population(spec.seed, spec.N_population))
    if spec.generator is Generator.BINOMIAL_SUM_CONSTRAINT:
        return _binomial_sample(stream(spec.seed, _POPULATION), spec.N_population)
    return spec.draw(stream(spec.seed, _POPULATION), spec.N_population)


def subsample(spec: ExperimentSpec, pop: ObservationSet, n: int, *key: int) -> ObservationSet:
    """``n`` rows of the population draw, without replacement, from stream ``key``."""
    rng = stream(spec.seed, *key)
    if spec.generator is Generator.BINOMIAL_SUM_CONSTRAINT:
        return _binomial_sample(rng, n)
    if n == pop.n:
        return pop
    return pop.take(rng.choice(pop.n, size=n, replace=False))


# ---------------------------------------------------------------- population targets

def approximate_population_interval(spec: ExperimentSpec) -> tuple[IntervalEstimate, SupportTable]:
    """Bounds on the full population draw: the finite-N stand-in for the true interval."""
    table = _collapse(population(spec), _estimand(spec))
    return solve_bounds(table, spec.box), table


def binomial_design_table() -> SupportTable:
    """Exact law of ``(Q, Q + E)`` for the binomial-sum design as a support table."""
    k = np.arange(_BINOM_TRIALS + 1)
    pk = stats.binom.pmf(k, _BINOM_TRIALS, 0.5)
    z = (k - 50) / 5.0
    Q, E = np.meshgrid(z, z, indexing="ij")
    P = np.outer(pk, pk)
    keep = P.ravel() > 0
    q, y, p = Q.ravel()[keep], (Q + E).ravel()[keep], P.ravel()[keep]
    p = p / p.sum()
    table = SupportTable.from_arrays(y, np.ones_like(y), p, t=np.column_stack([q, y]))
    return replace(table, column_names=("q", "y"))


def population_constrained_interval(table: SupportTable, box: WeightBox, H: np.ndarray) -> tuple[float, float]:
    """Exact bounds of ``sum w f p / sum w g p`` over the box with ``sum w H p = 0``.

    Solved as two linear programs after the Charnes-Cooper substitution
    ``y = t w``, ``t = 1 / sum w g p``.
    """
    p, f, g = table.phat, table.f, table.g
    K = table.K
    # variables (y_1..y_K, t)
    A_eq = np.vstack([np.append(g * p, 0.0), np.append(H * p, 0.0)])
    b_eq = np.array([1.0, 0.0])
    eye = sparse.identity(K, format="csr")
    ones = sparse.csr_matrix(np.ones((K, 1)))
    A_ub = sparse.vstack([sparse.hstack([eye, -box.hi * ones]),
                          sparse.hstack([-eye, box.lo * ones])], format="csr")
    b_ub = np.zeros(2 * K)
    bounds = [(0, None)] * (K + 1)
    out = []
    for sgn in (1.0, -1.0):
        c = np.append(sgn * f * p, 0.0)
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if res.status != 0:
            raise RuntimeError(f"population program failed: {res.message}")
        out.append(sgn * res.fun)
    return out[0], out[1]


# ---------------------------------------------------------------- experiments

def _interval(spec, obs):
    table = _collapse(obs, _estimand(spec))
    return solve_bounds(table, spec.box), table


def run_bias_experiment(spec: ExperimentSpec) -> list[dict]:
    """Mean bias of each estimated endpoint against the population-draw interval, per n."""
    target, _ = approximate_population_interval(spec)
    pop = population(spec)
    rows = []
    for n in spec.n_grid:
        def one(r, n=n):
            ie, _ = _interval(spec, subsample(spec, pop, n, _BIAS, n, r))
            return ie.beta_lo - target.beta_lo, ie.beta_hi - target.beta_hi
        d = np.array(_map(one, range(spec.replicates), spec.threads))
        rows.append({
            "n": n,
            "replicates": spec.replicates,
            "bias_lo": float(d[:, 0].mean()),
            "bias_hi": float(d[:, 1].mean()),
            "mcse_lo": float(d[:, 0].std(ddof=1) / math.sqrt(len(d))),
            "mcse_hi": float(d[:, 1].std(ddof=1) / math.sqrt(len(d))),
        })
    return rows


def run_coverage_experiment(spec: ExperimentSpec) -> list[dict]:
    """Fraction of replicates whose confidence interval contains the population interval."""
    target, _ = approximate_population_interval(spec)
    pop = population(spec)
    rows = []
    for n in spec.coverage_n:
        def one(r, n=n):
            ie, table = _interval(spec, subsample(spec, pop, n, _COVERAGE, n, r))
            hit = {}
            if "asymptotic" in spec.coverage_methods:
                ci = confidence_interval(ie, table, alpha=spec.alpha)
                hit["asymptotic"] = ci.contains(target.beta_lo, target.beta_hi)
            if "bootstrap" in spec.coverage_methods:
                bci = bootstrap_table(table, spec.box, spec.bootstrap_R, spec.alpha,
                                      seed=int(np.random.SeedSequence(spec.seed, spawn_key=(_COVERAGE, n, r))
                                               .generate_state(1)[0]))
                hit["bootstrap"] = bci.contains(target.beta_lo, target.beta_hi)
            return hit
        hits = _map(one, range(spec.replicates), spec.threads)
        for m in spec.coverage_methods:
            if m == "theorem3":
                continue  # only meaningful for the constraint design
            rows.append({"n": n, "method": m, "replicates": spec.replicates,
                         "coverage": float(np.mean([h[m] for h in hits]))})
    return rows


def run_power_experiment(spec: ExperimentSpec, beta_tilde_grid: Sequence[float] | None = None,
                         n: int | None = None) -> list[dict]:
    """Rejection frequency of ``H0: beta_tilde in I(a, b)`` at level ``alpha`` per grid point."""
    grid = tuple(spec.beta_tilde_grid if beta_tilde_grid is None else beta_tilde_grid)
    n = spec.power_n if n is None else n
    pop = population(spec)

    def one(r):
        ie, table = _interval(spec, subsample(spec, pop, n, _POWER, n, r))
        return [p_value(ie, table, None, b) < spec.alpha for b in grid]

    rej = np.array(_map(one, range(spec.replicates), spec.threads), dtype=float)
    return [{"beta_tilde": float(b), "n": n, "replicates": spec.replicates,
             "rejection": float(rej[:, j].mean())} for j, b in enumerate(grid)]


@dataclass(frozen=True)
class SamplingDistribution:
    draws: np.ndarray
    mean: float
    sd: float
    ks: float
    n: int

    def histogram(self, bins: int) -> list[dict]:
        counts, edges = np.histogram(self.draws, bins=bins)
        width = np.diff(edges)
        dens = counts / (counts.sum() * width)
        mid = (edges[:-1] + edges[1:]) / 2
        normal = stats.norm.pdf(mid, self.mean, self.sd) if self.sd > 0 else np.zeros_like(mid)
        return [{"bin_lo": float(a), "bin_hi": float(b), "count": int(c), "density": float(d),
                 "normal_density": float(nd)}
                for a, b, c, d, nd in zip(edges[:-1], edges[1:], counts, dens, normal)]


def run_sampling_distribution(spec: ExperimentSpec, n: int | None = None,
                              replicates: int | None = None) -> SamplingDistribution:
    """Draws of the estimated upper bound and the normal limit they are compared with.

    The limit has mean ``beta_H`` and variance ``sigma^2(w_H) / n``, both taken from
    the population draw.
    """
    n = spec.histogram_n if n is None else n
    R = spec.histogram_replicates if replicates is None else replicates
    target, table = approximate_population_interval(spec)
    sd = math.sqrt(sigma_hat(table, target.w_hi, None, target.beta_hi) / n)
    pop = population(spec)

    def one(r):
        return _interval(spec, subsample(spec, pop, n, _SAMPLING, n, r))[0].beta_hi

    draws = np.array(_map(one, range(R), spec.threads))
    if n == pop.n or sd == 0:
        ks = float(np.mean(draws != target.beta_hi))
    else:
        ks = float(stats.kstest(draws, stats.norm(target.beta_hi, sd).cdf).statistic)
    return SamplingDistribution(draws, target.beta_hi, sd, ks, n)


def _consim_problem(spec: ExperimentSpec, obs: ObservationSet, alpha1: float) -> ConstraintProblem:
    table = _collapse(obs, Estimand.mean("y"))
    cons = (AuxConstraint.covariate_mean("q", spec.qbar, alpha1),)
    return ConstraintProblem(table, spec.box, cons, SolverOptions(n_starts=spec.solver_starts))


def consim_target(spec: ExperimentSpec) -> tuple[float, float]:
    """Population constrained interval of the binomial-sum design (exact law, exact constraint)."""
    return _consim_target(spec.box, spec.qbar)


@lru_cache(maxsize=8)
def _consim_target(box: WeightBox, qbar: float) -> tuple[float, float]:
    table = binomial_design_table()
    return population_constrained_interval(table, box, table.column("q") - qbar)


def run_constraint_simulation(spec: ExperimentSpec) -> tuple[list[dict], list[dict]]:
    """Coverage of the widened constrained interval and its mean width over splits.

    Returns ``(coverage_rows, width_rows)``.  Coverage uses ``replicates`` samples at
    the configured split; widths average ``split_replicates`` samples per split.
    """
    a1, a2 = spec.significance
    lo_pop, hi_pop = consim_target(spec)
    n = spec.constraint_n

    def one(r):
        obs = _binomial_sample(stream(spec.seed, _CONSIM, n, r), n)
        prob = _consim_problem(spec, obs, a1)
        ci, aci = prob.solve(a1, a2)
        unc = solve_bounds(prob.table, spec.box)
        return (aci.contains(lo_pop, hi_pop), ci.width < unc.width, aci.width, ci.width, unc.width)

    res = _map(one, range(spec.replicates), spec.threads)
    cov = [{
        "n": n, "alpha1": a1, "alpha2": a2, "replicates": spec.replicates,
        "population_lo": lo_pop, "population_hi": hi_pop,
        "coverage": float(np.mean([r[0] for r in res])),
        "narrower_than_unconstrained": float(np.mean([r[1] for r in res])),
        "mean_ci_width": float(np.mean([r[2] for r in res])),
        "mean_constrained_width": float(np.mean([r[3] for r in res])),
        "mean_unconstrained_width": float(np.mean([r[4] for r in res])),
    }]
    total = a1 + a2

    def split_widths(r):
        obs = _binomial_sample(stream(spec.seed, _SPLIT, n, r), n)
        prob = _consim_problem(spec, obs, spec.split_grid[0])
        return [prob.solve(s, total - s)[1].width for s in spec.split_grid]

    W = np.array(_map(split_widths, range(spec.split_replicates), spec.threads))
    widths = [{"alpha1": float(s), "alpha2": float(total - s), "replicates": spec.split_replicates,
               "mean_width": float(W[:, j].mean()),
               "mcse": float(W[:, j].std(ddof=1) / math.sqrt(len(W))) if len(W) > 1 else 0.0}
              for j, s in enumerate(spec.split_grid)]
    return cov, widths


# ---------------------------------------------------------------- output

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


def write_csv(rows: Sequence[dict], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def write_manifest(spec: ExperimentSpec, path: Path, files: Sequence[Path], extra: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "seed": spec.seed,
        "code_version": _version(),
        "spec": spec.echo(),
        "outputs": sorted(Path(f).name for f in files),
        "notes": {
            "limiting_variance": "sigma^2(w_H) for the histogram is evaluated on the population draw",
        },
    }
    if extra:
        doc["results"] = _plain(extra)
    with path.open("w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    return path


def run_fig1(spec: ExperimentSpec, out_dir: Path) -> list[Path]:
    """Bias, coverage, power and histogram tables for the standard-normal design."""
    out = Path(out_dir)
    files, extra = [], {}
    target, _ = approximate_population_interval(spec)
    extra["population_interval"] = [target.beta_lo, target.beta_hi]
    if "bias" in spec.outputs:
        files.append(write_csv(run_bias_experiment(spec), out / "bias.csv"))
    if "coverage" in spec.outputs:
        files.append(write_csv(run_coverage_experiment(spec), out / "coverage.csv"))
    if "power" in spec.outputs:
        files.append(write_csv(run_power_experiment(spec), out / "power.csv"))
    if "histogram" in spec.outputs:
        sd = run_sampling_distribution(spec)
        files.append(write_csv(sd.histogram(spec.histogram_bins), out / "histogram.csv"))
        extra["histogram"] = {"ks": sd.ks, "limit_mean": sd.mean, "limit_sd": sd.sd, "n": sd.n}
    write_manifest(spec, out / "manifest.yaml", files, extra)
    return files


def run_consim(spec: ExperimentSpec, out_dir: Path) -> list[Path]:
    """Coverage and width-vs-split tables for the binomial-sum constraint design."""
    out = Path(out_dir)
    cov, widths = run_constraint_simulation(spec)
    files = [write_csv(cov, out / "coverage.csv"), write_csv(widths, out / "width_vs_split.csv")]
    write_manifest(spec, out / "manifest.yaml", files)
    return files
