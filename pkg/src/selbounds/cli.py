"""Command-line front end: ``selbounds analyze | simulate | tune-split``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import simharness
from .bootstrap import bootstrap_table
from .constraints import (
    AuxConstraint,
    ConstraintProblem,
    LevelConvention,
    SolverOptions,
    theorem3_ci,
    solve_constrained_bounds,
    to_significance,
    tune_alpha_split,
)
from .core import (
    ContinuousSupportWarning,
    Estimand,
    ObservationSet,
    SelectionBoundsError,
    WeightBox,
    collapse_support,
    evaluate,
)
from .inference import confidence_interval, p_value, sigma_hat, z_upper
from .lfp import solve_bounds
from .parametric import ParametricFamily, Sign, solve_parametric_bounds

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4
_ESTIMAND_COLUMNS = {"mean": ("y",), "ols": ("x", "y"), "iv": ("z", "x", "y")}


class ConfigError(Exception):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"config field '{field_name}': {msg}")
        self.field = field_name


class DataError(Exception):
    def __init__(self, msg: str, column: str | None = None, row: int | None = None):
        super().__init__(msg)
        self.column, self.row = column, row


SpecError = ConfigError


# ---------------------------------------------------------------- configuration

def _get(d: dict, key: str, where: str, kind=None, default: Any = ..., check=None):
    if not isinstance(d, dict):
        raise ConfigError(where, "expected a mapping")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{where}.{key}".lstrip("."), "missing")
        return default
    v = d[key]
    name = f"{where}.{key}".lstrip(".")
    if kind is not None:
        try:
            v = kind(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(name, str(e)) from None
    if check is not None and not check(v):
        raise ConfigError(name, f"invalid value {d[key]!r}")
    return v


@dataclass(frozen=True)
class AnalysisConfig:
    estimand_kind: str
    columns: dict[str, str]
    box: WeightBox
    alpha: float = 0.05
    bootstrap_R: int = 1000
    bootstrap_seed: int = 0
    bootstrap_alpha: float = 0.05
    constraints: tuple[AuxConstraint, ...] = ()
    alpha2: float = 0.05
    solver: SolverOptions = SolverOptions()
    family: ParametricFamily | None = None
    hypotheses: tuple[float, ...] = ()
    split_total: float = 0.05
    split_grid: tuple[float, ...] = ()
    extra_columns: tuple[str, ...] = ()

    @property
    def estimand(self) -> Estimand:
        c = self.columns
        if self.estimand_kind == "mean":
            return Estimand.mean(c["y"])
        if self.estimand_kind == "ols":
            return Estimand.ols(c["x"], c["y"])
        return Estimand.iv(c["z"], c["x"], c["y"])

    def required_columns(self) -> tuple[str, ...]:
        cols = list(self.columns.values()) + list(self.extra_columns)
        if self.family is not None:
            cols += list(self.family.selection_columns)
        return tuple(dict.fromkeys(cols))


def _level(v, conv: LevelConvention, name: str) -> float:
    try:
        return to_significance(float(v), conv)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from None


def _constraint(item: dict, i: int, conv: LevelConvention) -> tuple[AuxConstraint, tuple[str, ...]]:
    where = f"constraints.items[{i}]"
    kind = _get(item, "kind", where, str)
    share = _level(_get(item, "alpha_share", where), conv, f"{where}.alpha_share")
    if kind == "response_rate":
        r = _get(item, "r", where, float, check=lambda x: 0 < x <= 1)
        return AuxConstraint.response_rate(r, share), ()
    if kind == "covariate_mean":
        col = _get(item, "column", where, str)
        return AuxConstraint.covariate_mean(col, _get(item, "qbar", where, float), share), (col,)
    if kind == "linear_moment":
        # E[lambda (column - offset)] <= 0 in the population
        col = _get(item, "column", where, str)
        off = _get(item, "offset", where, float, 0.0)
        return AuxConstraint.linear_moment(lambda c, col=col, off=off: c[col] - off, share), (col,)
    raise ConfigError(f"{where}.kind", f"unknown constraint kind {kind!r}")


def parse_analysis_config(doc: dict) -> AnalysisConfig:
    """Validate an analysis config document; raises ``ConfigError`` naming the field."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a mapping")
    est = _get(doc, "estimand", "")
    kind = _get(est, "kind", "estimand", str, check=lambda k: k in _ESTIMAND_COLUMNS)
    cmap = _get(est, "columns", "estimand", dict)
    for role in _ESTIMAND_COLUMNS[kind]:
        _get(cmap, role, "estimand.columns", str)
    columns = {role: str(cmap[role]) for role in _ESTIMAND_COLUMNS[kind]}
    b = _get(doc, "box", "")
    try:
        box = WeightBox(_get(b, "a", "box", float), _get(b, "b", "box", float))
    except ValueError as e:
        raise ConfigError("box", str(e)) from None
    alpha = _get(doc, "alpha", "", float, 0.05, lambda x: 0 < x < 1)
    bs = _get(doc, "bootstrap", "", dict, {})
    R = _get(bs, "R", "bootstrap", int, 1000, lambda x: x >= 100)
    bseed = _get(bs, "seed", "bootstrap", int, 0)
    balpha = _get(bs, "alpha", "bootstrap", float, alpha, lambda x: 0 < x < 1)

    cons, extra, alpha2 = (), [], alpha
    split_total, split_grid = 0.05, ()
    cdoc = doc.get("constraints")
    if cdoc:
        conv = LevelConvention(_get(cdoc, "level_convention", "constraints", str, "significance",
                                    lambda s: s in ("significance", "coverage")))
        items = _get(cdoc, "items", "constraints", list)
        if not items:
            raise ConfigError("constraints.items", "empty constraint list")
        parsed = [_constraint(it, i, conv) for i, it in enumerate(items)]
        cons = tuple(c for c, _ in parsed)
        extra = [col for _, cols in parsed for col in cols]
        alpha2 = _level(_get(cdoc, "alpha2", "constraints", default=0.05 if conv is LevelConvention.SIGNIFICANCE
                              else 0.95), conv, "constraints.alpha2")
        if sum(c.alpha_share for c in cons) + alpha2 >= 1:
            raise ConfigError("constraints", "alpha shares plus alpha2 must be below one")
        tdoc = _get(cdoc, "tune_split", "constraints", dict, {})
        split_total = _get(tdoc, "total_alpha", "constraints.tune_split", float,
                           sum(c.alpha_share for c in cons) + alpha2, lambda x: 0 < x < 1)
        split_grid = tuple(_get(tdoc, "alpha1_grid", "constraints.tune_split", list,
                                list(np.linspace(0.01, 0.9, 10) * split_total)))
        if any(not 0 <= a < split_total for a in split_grid):
            raise ConfigError("constraints.tune_split.alpha1_grid", "values must lie in [0, total_alpha)")
    sdoc = _get(doc, "solver", "", dict, {})
    solver = SolverOptions(n_starts=_get(sdoc, "n_starts", "solver", int, 16, lambda x: x >= 1),
                           seed=_get(sdoc, "seed", "solver", int, 0))
    family = None
    pdoc = doc.get("parametric")
    if pdoc:
        sel = tuple(_get(pdoc, "selection_columns", "parametric", list))
        signs = _get(pdoc, "sign_constraints", "parametric", list, [])
        try:
            family = ParametricFamily(sel, tuple(
                tuple(Sign(x) for x in s) if isinstance(s, list) else Sign(s) for s in signs))
        except ValueError as e:
            raise ConfigError("parametric", str(e)) from None
    hyp = tuple(float(h) for h in _get(doc, "hypotheses", "", list, []))
    return AnalysisConfig(kind, columns, box, alpha, R, bseed, balpha, cons, alpha2, solver, family,
                          hyp, split_total, split_grid, tuple(extra))


def load_yaml(path: Path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} not found") from None
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"cannot parse {path}: {e}") from None
    return doc or {}


def load_csv(path: Path, columns: tuple[str, ...], bin_step: float | None = None) -> ObservationSet:
    """Read the named numeric columns of a CSV file with a header row."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header:
                raise DataError(f"{path} has no header row")
            header = [h.strip() for h in header]
            idx = {}
            for c in columns:
                if c not in header:
                    raise DataError(f"column {c!r} not found in {path}", column=c)
                idx[c] = header.index(c)
            rows = []
            for i, rec in enumerate(reader, start=1):
                if not rec:
                    continue
                try:
                    rows.append([float(rec[idx[c]]) for c in columns])
                except (ValueError, IndexError):
                    bad = next(c for c in columns if not _is_number(rec, idx[c]))
                    raise DataError(f"non-numeric value in column {bad!r}, row {i}", bad, i) from None
    except FileNotFoundError:
        raise DataError(f"{path} not found") from None
    X = np.array(rows, dtype=float).reshape(-1, len(columns))
    if X.shape[0] < 2:
        raise DataError(f"{path} has fewer than two data rows")
    bad = ~np.isfinite(X)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"missing or infinite value in column {columns[c]!r}, row {r + 1}", columns[c], int(r) + 1)
    if bin_step:
        X = np.round(X / bin_step) * bin_step
    return ObservationSet(X, columns)


def _is_number(rec, j):
    try:
        float(rec[j])
        return True
    except (ValueError, IndexError):
        return False


# ---------------------------------------------------------------- analysis

def _unweighted(table, alpha):
    w = np.ones(table.K)
    b = evaluate(table, w)
    se = math.sqrt(sigma_hat(table, w, None, b) / table.n)
    z = z_upper(alpha / 2)
    return {"estimate": b, "ci": [b - z * se, b + z * se], "se": se}


def run_analysis(cfg: AnalysisConfig, obs: ObservationSet) -> dict:
    """Every configured estimate, as plain numbers in a nested dict."""
    est = cfg.estimand
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ContinuousSupportWarning)
        table = collapse_support(obs, est)
    rep: dict[str, Any] = {
        "n": obs.n,
        "K": table.K,
        "estimand": cfg.estimand_kind,
        "box": {"a": cfg.box.a, "b": cfg.box.b},
        "warnings": [str(w.message) for w in caught],
    }
    rep["unweighted"] = _unweighted(table, cfg.alpha)
    ie = solve_bounds(table, cfg.box)
    ci = confidence_interval(ie, table, alpha=cfg.alpha)
    bci = bootstrap_table(table, cfg.box, cfg.bootstrap_R, cfg.bootstrap_alpha, cfg.bootstrap_seed)
    rep["interval"] = {
        "beta_lo": ie.beta_lo, "beta_hi": ie.beta_hi,
        "asymptotic_ci": [ci.c_lo, ci.c_hi], "alpha": cfg.alpha,
        "bootstrap_ci": [bci.c_lo, bci.c_hi], "bootstrap_R": bci.R, "bootstrap_alpha": bci.alpha,
        "bootstrap_redraws": bci.redraws,
        "degenerate_cells_lo": list(ie.degenerate_cells_lo),
        "degenerate_cells_hi": list(ie.degenerate_cells_hi),
    }
    if cfg.hypotheses:
        rep["p_values"] = [{"beta": b, "p": p_value(ie, table, est, b)} for b in cfg.hypotheses]
    if cfg.constraints:
        a1 = sum(c.alpha_share for c in cfg.constraints)
        cci = solve_constrained_bounds(table, cfg.box, cfg.constraints, a1, cfg.alpha2, cfg.solver)
        t3 = theorem3_ci(cci, table)
        d = cci.solver_diagnostics
        rep["constrained"] = {
            "beta_lo": cci.beta_lo, "beta_hi": cci.beta_hi,
            "alpha1": a1, "alpha2": cfg.alpha2, "ci": [t3.c_lo, t3.c_hi],
            "diagnostics": {
                "restarts": d.get("restarts"), "best_kkt_residual": d.get("best_kkt_residual"),
                "converged": d.get("converged", True), "feasibility_slacks": d.get("feasibility_slacks"),
            },
        }
    if cfg.family is not None:
        pi = solve_parametric_bounds(obs, est, cfg.box, cfg.family, seed=cfg.solver.seed)
        rep["parametric"] = {
            "beta_lo": pi.beta_lo, "beta_hi": pi.beta_hi,
            "alpha_lo": [float(x) for x in pi.alpha_lo], "alpha_hi": [float(x) for x in pi.alpha_hi],
            "diagnostics": pi.diagnostics,
        }
    return rep


def _g(x) -> str:
    return f"{x:.12g}"


def _pair(p) -> str:
    return f"[{_g(p[0])}, {_g(p[1])}]"


def format_report(rep: dict) -> str:
    lines = [
        f"estimand: {rep['estimand']}   n = {rep['n']}   support cells K = {rep['K']}",
        f"weight box: a = {_g(rep['box']['a'])}, b = {_g(rep['box']['b'])}",
    ]
    for w in rep["warnings"]:
        lines.append(f"warning: {w}")
    u = rep["unweighted"]
    lines += ["", "unweighted estimate", f"  estimate     {_g(u['estimate'])}",
              f"  Wald CI      {_pair(u['ci'])}"]
    iv = rep["interval"]
    lines += ["", "identified interval (weights in the box)",
              f"  interval     {_pair([iv['beta_lo'], iv['beta_hi']])}",
              f"  asymptotic   {_pair(iv['asymptotic_ci'])}  (alpha = {_g(iv['alpha'])})",
              f"  bootstrap    {_pair(iv['bootstrap_ci'])}  (R = {iv['bootstrap_R']}, redraws = "
              f"{iv['bootstrap_redraws']})",
              f"  degenerate cells: lower {iv['degenerate_cells_lo']}, upper {iv['degenerate_cells_hi']}"]
    for pv in rep.get("p_values", []):
        lines.append(f"  p-value for beta = {_g(pv['beta'])}: {_g(pv['p'])}")
    if "constrained" in rep:
        c = rep["constrained"]
        d = c["diagnostics"]
        lines += ["", "constrained interval",
                  f"  interval     {_pair([c['beta_lo'], c['beta_hi']])}",
                  f"  widened CI   {_pair(c['ci'])}  (alpha1 = {_g(c['alpha1'])}, alpha2 = {_g(c['alpha2'])})",
                  f"  solver: restarts = {d['restarts']}, converged = {d['converged']}, "
                  f"KKT residual = {_g(d['best_kkt_residual'])}"]
    if "parametric" in rep:
        p = rep["parametric"]
        lines += ["", "parametric selection model",
                  f"  interval     {_pair([p['beta_lo'], p['beta_hi']])}",
                  f"  alpha (lo)   {[_g(x) for x in p['alpha_lo']]}",
                  f"  alpha (hi)   {[_g(x) for x in p['alpha_hi']]}",
                  f"  restarts = {p['diagnostics']['restarts']}, active constraints = "
                  f"{p['diagnostics']['active_constraints']}"]
    return "\n".join(lines) + "\n"


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def _write_report(rep: dict, out: Path, stem: str = "report") -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    txt, js = out / f"{stem}.txt", out / f"{stem}.json"
    txt.write_text(format_report(rep) if stem == "report" else _format_split(rep))
    js.write_text(json.dumps(rep, indent=2, default=_json_default) + "\n")
    return txt, js


def _format_split(rep: dict) -> str:
    lines = [f"alpha split search, total alpha = {_g(rep['total_alpha'])}", "  alpha1        alpha2        CI width"]
    for a1, a2, w in zip(rep["alpha1"], rep["alpha2"], rep["width"]):
        lines.append(f"  {_g(a1):<13} {_g(a2):<13} {_g(w)}")
    lines.append(f"best split: alpha1 = {_g(rep['best'][0])}, alpha2 = {_g(rep['best'][1])}")
    return "\n".join(lines) + "\n"


def run_tune_split(cfg: AnalysisConfig, obs: ObservationSet) -> dict:
    if not cfg.constraints:
        raise ConfigError("constraints", "tune-split needs at least one constraint")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContinuousSupportWarning)
        table = collapse_support(obs, cfg.estimand)
    prob = ConstraintProblem(table, cfg.box, cfg.constraints, cfg.solver)
    grid = [(a, cfg.split_total - a) for a in cfg.split_grid]
    res = tune_alpha_split(prob, cfg.split_total, grid)
    return {"total_alpha": cfg.split_total, "alpha1": [g[0] for g in res.grid],
            "alpha2": [g[1] for g in res.grid], "width": list(res.widths), "best": list(res.best)}


# ---------------------------------------------------------------- simulation specs

_SPEC_FIELDS = {
    "N_population": int, "n_grid": list, "replicates": int, "alpha": float, "seed": int,
    "outputs": list, "bootstrap_R": int, "coverage_n": list, "coverage_methods": list,
    "power_n": int, "beta_tilde_grid": list, "histogram_n": int, "histogram_replicates": int,
    "histogram_bins": int, "qbar": float, "constraint_n": int, "alpha1": float, "alpha2": float,
    "level_convention": str, "split_grid": list, "split_replicates": int, "solver_starts": int,
}


def bundled_spec(name: str) -> Path | None:
    res = resources.files("selbounds").joinpath("specs", name if name.endswith(".spec") else f"{name}.spec")
    return Path(str(res)) if res.is_file() else None


def parse_experiment_spec(doc: dict, seed: int | None = None, threads: int | None = None):
    """Return ``(experiment name, ExperimentSpec)`` from a spec document."""
    if not isinstance(doc, dict):
        raise SpecError("<root>", "spec must be a mapping")
    exp = _get(doc, "experiment", "", str, check=lambda s: s in ("fig1", "consim"))
    kw: dict[str, Any] = {}
    for k, v in doc.items():
        if k in ("experiment", "box", "generator"):
            continue
        if k not in _SPEC_FIELDS:
            raise SpecError(k, "unknown field")
        kw[k] = _get(doc, k, "", _SPEC_FIELDS[k])
    if "box" in doc:
        try:
            kw["box"] = WeightBox(_get(doc["box"], "a", "box", float), _get(doc["box"], "b", "box", float))
        except ValueError as e:
            raise SpecError("box", str(e)) from None
    kw["generator"] = _get(doc, "generator", "", str,
                           "std_normal_mean" if exp == "fig1" else "binomial_sum_constraint",
                           lambda s: s in ("std_normal_mean", "binomial_sum_constraint"))
    if seed is not None:
        kw["seed"] = seed
    if threads is not None:
        kw["threads"] = threads
    try:
        return exp, simharness.ExperimentSpec(**kw)
    except ValueError as e:
        raise SpecError("spec", str(e)) from None


def run_simulation(spec_path: str, out: Path, seed: int | None = None, threads: int | None = None) -> list[Path]:
    path = Path(spec_path)
    if not path.exists():
        path = bundled_spec(spec_path) or path
    exp, spec = parse_experiment_spec(load_yaml(path), seed, threads)
    if exp == "fig1":
        return simharness.run_fig1(spec, out)
    return simharness.run_consim(spec, out)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selbounds", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, hlp in (("analyze", "bounds, confidence intervals and diagnostics for one dataset"),
                      ("tune-split", "choose the alpha split for the constrained interval"),
                      ("simulate", "run a bundled or custom simulation spec")):
        s = sub.add_parser(verb, help=hlp)
        s.add_argument("--config", required=True,
                       help="YAML config (simulate: spec file or bundled name such as fig1)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--threads", type=int, default=1)
        if verb != "simulate":
            s.add_argument("--data", required=True, help="CSV file with a header row")
            s.add_argument("--bin-continuous", type=float, default=None, metavar="STEP",
                           help="round every column to a multiple of STEP before collapsing")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.verb == "simulate":
            files = run_simulation(args.config, out, args.seed, args.threads)
            print("\n".join(str(f) for f in files))
            return EXIT_OK
        cfg = parse_analysis_config(load_yaml(Path(args.config)))
        if args.bin_continuous is not None and not args.bin_continuous > 0:
            raise ConfigError("--bin-continuous", "step must be positive")
        if args.seed is not None:
            cfg = _with_seed(cfg, args.seed)
        if args.verb == "tune-split" and not cfg.constraints:
            raise ConfigError("constraints", "tune-split needs at least one constraint")
        obs = load_csv(Path(args.data), cfg.required_columns(), args.bin_continuous)
        if args.verb == "analyze":
            txt, _ = _write_report(run_analysis(cfg, obs), out)
        else:
            txt, _ = _write_report(run_tune_split(cfg, obs), out, "split")
        sys.stdout.write(txt.read_text())
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SelectionBoundsError as e:
        print(f"estimation error ({type(e).__module__}.{type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_ESTIMATION


def _with_seed(cfg: AnalysisConfig, seed: int) -> AnalysisConfig:
    return replace(cfg, bootstrap_seed=seed, solver=replace(cfg.solver, seed=seed))


if __name__ == "__main__":
    sys.exit(main())
