import json

import numpy as np
import pytest
import yaml

from selbounds.bootstrap import bootstrap_table
from selbounds.cli import (
    ConfigError,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_ESTIMATION,
    EXIT_OK,
    load_csv,
    main,
    parse_analysis_config,
)
from selbounds.constraints import solve_constrained_bounds, theorem3_ci
from selbounds.core import Estimand, WeightBox, collapse_support
from selbounds.inference import confidence_interval
from selbounds.lfp import solve_bounds

MEAN = {"estimand": {"kind": "mean", "columns": {"y": "y"}}, "box": {"a": 0.1, "b": 1.0},
        "bootstrap": {"R": 200, "seed": 3}}


def write(tmp_path, doc, data):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    csv = tmp_path / "data.csv"
    cols = list(data)
    rows = np.column_stack([data[c] for c in cols])
    csv.write_text(",".join(cols) + "\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n")
    return cfg, csv


@pytest.fixture
def normal_data():
    rng = np.random.default_rng(1)
    return {"y": np.round(rng.standard_normal(1000), 3), "q": np.round(rng.standard_normal(1000), 1)}


def run(tmp_path, doc, data, *extra):
    cfg, csv = write(tmp_path, doc, data)
    out = tmp_path / "out"
    code = main(["analyze", "--config", str(cfg), "--data", str(csv), "--out", str(out), *extra])
    return code, out


def test_report_matches_library_calls(tmp_path, normal_data, capsys):
    code, out = run(tmp_path, MEAN, normal_data)
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    obs = load_csv(tmp_path / "data.csv", ("y",))
    table = collapse_support(obs, Estimand.mean("y"))
    box = WeightBox(0.1, 1.0)
    ie = solve_bounds(table, box)
    ci = confidence_interval(ie, table)
    bci = bootstrap_table(table, box, 200, 0.05, 3)
    iv = rep["interval"]
    assert (iv["beta_lo"], iv["beta_hi"]) == (ie.beta_lo, ie.beta_hi)
    assert iv["asymptotic_ci"] == [ci.c_lo, ci.c_hi]
    assert iv["bootstrap_ci"] == [bci.c_lo, bci.c_hi]
    # the n = 1000 interval sits near the large-sample one
    assert abs(ie.beta_hi - 0.902) < 0.15 and abs(ie.beta_lo + 0.902) < 0.15
    txt = (out / "report.txt").read_text()
    assert f"{ie.beta_hi:.12g}" in txt and f"{ci.c_lo:.12g}" in txt
    assert txt == capsys.readouterr().out


def test_constraints_in_report(tmp_path, normal_data):
    doc = dict(MEAN, constraints={"alpha2": 0.03, "items": [
        {"kind": "covariate_mean", "column": "q", "qbar": 0.0, "alpha_share": 0.02}]})
    code, out = run(tmp_path, doc, normal_data)
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    cfg = parse_analysis_config(doc)
    table = collapse_support(load_csv(tmp_path / "data.csv", ("y", "q")), Estimand.mean("y"), warn_continuous=False)
    cci = solve_constrained_bounds(table, cfg.box, cfg.constraints, 0.02, 0.03, cfg.solver)
    t3 = theorem3_ci(cci, table)
    assert rep["constrained"]["beta_hi"] == cci.beta_hi
    assert rep["constrained"]["ci"] == [t3.c_lo, t3.c_hi]


def test_equal_box_collapses_to_point_estimate(tmp_path, normal_data):
    code, out = run(tmp_path, dict(MEAN, box={"a": 0.5, "b": 0.5}), normal_data)
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    m = normal_data["y"].mean()
    iv = rep["interval"]
    assert iv["beta_lo"] == pytest.approx(m, abs=1e-12) and iv["beta_hi"] == pytest.approx(m, abs=1e-12)
    np.testing.assert_allclose(iv["asymptotic_ci"], rep["unweighted"]["ci"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("doc, field", [
    ({"box": {"a": 0.1, "b": 1.0}}, "estimand"),
    (dict(MEAN, box={"a": 2.0, "b": 1.0}), "box"),
    (dict(MEAN, estimand={"kind": "probit", "columns": {}}), "estimand.kind"),
    (dict(MEAN, bootstrap={"R": 10}), "bootstrap.R"),
    (dict(MEAN, constraints={"items": [{"kind": "bogus", "alpha_share": 0.01}]}), "constraints.items[0].kind"),
])
def test_config_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError) as e:
        parse_analysis_config(doc)
    assert e.value.field == field


def test_exit_codes(tmp_path, normal_data):
    assert run(tmp_path, dict(MEAN, box={"a": 2.0, "b": 1.0}), normal_data)[0] == EXIT_CONFIG
    bad = dict(MEAN, estimand={"kind": "mean", "columns": {"y": "missing"}})
    assert run(tmp_path, bad, normal_data)[0] == EXIT_DATA
    rr = dict(MEAN, constraints={"items": [{"kind": "response_rate", "r": 0.05, "alpha_share": 0.02}]})
    assert run(tmp_path, rr, normal_data)[0] == EXIT_ESTIMATION


def test_non_numeric_cell_is_a_data_error(tmp_path, capsys):
    cfg, csv = write(tmp_path, MEAN, {"y": np.arange(5.0)})
    csv.write_text("y\n1\n2\nabc\n4\n")
    code = main(["analyze", "--config", str(cfg), "--data", str(csv), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    assert "y" in capsys.readouterr().err


def test_bin_continuous(tmp_path, normal_data):
    code, out = run(tmp_path, MEAN, normal_data, "--bin-continuous", "0.5")
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["K"] < 20 and not rep["warnings"]


def test_seed_override_changes_bootstrap_only(tmp_path, normal_data):
    _, out = run(tmp_path, MEAN, normal_data)
    a = json.loads((out / "report.json").read_text())
    _, out = run(tmp_path, MEAN, normal_data, "--seed", "99")
    b = json.loads((out / "report.json").read_text())
    assert a["interval"]["beta_hi"] == b["interval"]["beta_hi"]
    assert a["interval"]["bootstrap_ci"] != b["interval"]["bootstrap_ci"]


def test_tune_split(tmp_path, normal_data):
    doc = dict(MEAN, constraints={"alpha2": 0.03, "items": [
        {"kind": "covariate_mean", "column": "q", "qbar": 0.0, "alpha_share": 0.02}],
        "tune_split": {"total_alpha": 0.05, "alpha1_grid": [0.005, 0.02, 0.04]}})
    cfg, csv = write(tmp_path, doc, normal_data)
    out = tmp_path / "split"
    assert main(["tune-split", "--config", str(cfg), "--data", str(csv), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "split.json").read_text())
    assert len(rep["width"]) == 3
    assert rep["best"][0] == rep["alpha1"][int(np.argmin(rep["width"]))]
    cfg2, _ = write(tmp_path, MEAN, normal_data)
    assert main(["tune-split", "--config", str(cfg2), "--data", str(csv), "--out", str(out)]) == EXIT_CONFIG


def small_spec(tmp_path, experiment):
    doc = {"experiment": experiment, "seed": 5, "replicates": 100}
    if experiment == "fig1":
        doc.update(N_population=2000, n_grid=[50], coverage_n=[50], power_n=50, histogram_n=50,
                   histogram_replicates=100, bootstrap_R=100, beta_tilde_grid=[0.0, 2.0])
    else:
        doc.update(constraint_n=200, split_grid=[0.005, 0.025, 0.045], split_replicates=3,
                   level_convention="coverage", alpha1=0.98, alpha2=0.97)
    p = tmp_path / f"{experiment}.spec"
    p.write_text(yaml.safe_dump(doc))
    return p


@pytest.mark.parametrize("experiment, names", [
    ("fig1", {"bias.csv", "coverage.csv", "power.csv", "histogram.csv"}),
    ("consim", {"coverage.csv", "width_vs_split.csv"}),
])
def test_simulate_outputs_and_rerun(tmp_path, experiment, names):
    spec = small_spec(tmp_path, experiment)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "--config", str(spec), "--out", str(out)]) == EXIT_OK
        assert {p.name for p in out.glob("*.csv")} == names
        assert (out / "manifest.yaml").exists()
        outs.append(out)
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_bad_spec(tmp_path):
    p = tmp_path / "bad.spec"
    p.write_text(yaml.safe_dump({"experiment": "fig1", "no_such_field": 1}))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
