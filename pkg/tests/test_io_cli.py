"""CSV ingestion, CLI subcommands, JSON/CSV outputs, and exit codes."""

import csv
import json

import numpy as np
import pytest

import tfb
from tfb import DataError, Estimand, EstimatorConfig
from tfb.effect_estimators import solve_full_sample
from tfb.io_cli import main, read_csv
from tfb.outcome_models import CvConfig
from tfb.tfb_solver import SolverConfig


# ----------------------------------------------------------------------
# fixtures: small CSV files
# ----------------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture
def toy_csv(tmp_path):
    """Identical control and treated covariates; treated outcomes sit
    exactly 2 higher, so the group-mean difference is 2."""
    rng = np.random.default_rng(42)
    m = 8
    x = rng.normal(size=(m, 2))
    y_c = x @ np.array([1.0, -0.5]) + rng.normal(scale=0.1, size=m)
    rows = ["y,d,x1,x2"]
    for i in range(m):
        rows.append(f"{y_c[i]},0,{x[i, 0]},{x[i, 1]}")
    for i in range(m):
        rows.append(f"{y_c[i] + 2.0},1,{x[i, 0]},{x[i, 1]}")
    return _write(tmp_path / "toy.csv", "\n".join(rows) + "\n")


@pytest.fixture
def noiseless_csv(tmp_path):
    """Outcome exactly linear in the covariate: the control fit has zero
    residual variance."""
    rows = ["y,d,x1"]
    xs = [0.0, 1.0, 2.0, 3.0, 0.5, 1.5, 2.5, 3.5]
    ds = [0, 0, 0, 0, 1, 1, 1, 1]
    for x, d in zip(xs, ds):
        rows.append(f"{3.0 * x + 1.0},{d},{x}")
    return _write(tmp_path / "noiseless.csv", "\n".join(rows) + "\n")


# ----------------------------------------------------------------------
# read_csv
# ----------------------------------------------------------------------


def test_read_csv_minimal(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n2,1,1.5\n")
    ds = read_csv(path)
    assert ds.n == 2 and ds.p == 1
    assert ds.columns == ("x1",)
    assert ds.n_control == 1 and ds.n_treated == 1


def test_read_csv_column_order_kept(tmp_path):
    path = _write(tmp_path / "a.csv", "x2,y,x1,d\n9,1,0.5,0\n8,2,1.5,1\n")
    ds = read_csv(path)
    assert ds.columns == ("x2", "x1")
    assert ds.x[0, 0] == 9.0 and ds.x[0, 1] == 0.5


def test_read_csv_bad_treatment_cell(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n2,2,1.5\n")
    with pytest.raises(DataError, match="row 3.*'d'"):
        read_csv(path)


def test_read_csv_unparseable_cell_named(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,oops\n2,1,1.5\n")
    with pytest.raises(DataError, match="row 2.*'x1'.*oops"):
        read_csv(path)


def test_read_csv_quoted_comma_header(tmp_path):
    # RFC-4180 quoting: a quoted header field may contain a comma
    path = _write(tmp_path / "a.csv", 'y,d,"x,1"\n1,0,0.5\n2,1,1.5\n')
    ds = read_csv(path)
    assert ds.columns == ("x,1",)
    assert ds.p == 1


def test_read_csv_missing_required_column(tmp_path):
    path = _write(tmp_path / "a.csv", "y,x1\n1,0.5\n2,1.5\n")
    with pytest.raises(DataError, match="'d'"):
        read_csv(path)
    path = _write(tmp_path / "b.csv", "d,x1\n0,0.5\n1,1.5\n")
    with pytest.raises(DataError, match="'y'"):
        read_csv(path)


def test_read_csv_too_few_rows(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n")
    with pytest.raises(DataError, match="fewer than 2"):
        read_csv(path)


def test_read_csv_empty_file(tmp_path):
    path = _write(tmp_path / "a.csv", "")
    with pytest.raises(DataError, match="empty"):
        read_csv(path)


def test_read_csv_ragged_row(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n2,1\n")
    with pytest.raises(DataError, match="row 3"):
        read_csv(path)


def test_read_csv_skips_blank_lines(tmp_path):
    path = _write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n\n2,1,1.5\n\n")
    assert read_csv(path).n == 2


# ----------------------------------------------------------------------
# weights subcommand + round trips
# ----------------------------------------------------------------------


def _read_weight_file(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_weights_roundtrip_full_precision(toy_csv, tmp_path, capsys):
    wpath = tmp_path / "w.csv"
    code = main(
        ["weights", "--data", toy_csv, "--weights-out", str(wpath), "--seed", "0"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["schema_version"] == "1"
    assert payload["config"]["command"] == "weights"
    assert payload["config"]["q"] == 0.95  # defaults echoed

    # recompute the same full-sample solve in memory
    ds = read_csv(toy_csv)
    config = EstimatorConfig(
        backend="ols",
        estimand=Estimand.ATT,
        cv=CvConfig(lambda_grid=None, folds=5, seed=0),
        solver=SolverConfig(max_iters=50000, tol=1e-10),
    )
    _, _, solution = solve_full_sample(ds, config, seed=0)

    rows = _read_weight_file(wpath)
    assert set(rows[0].keys()) == {"unit_index", "weight", "fold", "split"}
    assert all(r["fold"] == "-1" and r["split"] == "-1" for r in rows)
    by_unit = {int(r["unit_index"]): float(r["weight"]) for r in rows}
    control_rows = ds.control_rows()
    assert len(by_unit) == ds.n_control
    for w_mem, internal in zip(solution.weights, control_rows):
        # 17 significant digits reproduce the double exactly
        assert by_unit[int(ds.order[internal])] == w_mem
    assert sum(by_unit.values()) == pytest.approx(ds.n_control, rel=1e-12)


def test_weights_report_fields(toy_csv, tmp_path, capsys):
    wpath = tmp_path / "w.csv"
    assert main(["weights", "--data", toy_csv, "--weights-out", str(wpath)]) == 0
    report = json.loads(capsys.readouterr().out)["report"]
    # identical groups: the estimate sits at the group-mean difference
    assert report["point"] == pytest.approx(2.0, abs=0.05)
    assert abs(report["augmented_point"] - report["point"]) < 1e-6
    assert report["converged"] is True
    assert report["tfi"]["total"] >= 0.0
    assert report["ress"]["att"] > 0.9  # near-uniform weights


# ----------------------------------------------------------------------
# estimate subcommand
# ----------------------------------------------------------------------


def test_estimate_byte_identical(toy_csv, tmp_path):
    out = tmp_path / "est.json"
    args = [
        "estimate",
        "--data",
        toy_csv,
        "--splits",
        "3",
        "--seed",
        "5",
        "--out",
        str(out),
    ]
    assert main(args) == 0
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_estimate_toy_report(toy_csv, capsys):
    code = main(["estimate", "--data", toy_csv, "--splits", "3"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["schema_version"] == "1"
    config = payload["config"]
    assert config["splits"] == 3 and config["backend"] == "ols"
    report = payload["report"]
    # identical groups: point near the group-mean difference of 2
    assert report["point"] == pytest.approx(2.0, abs=0.25)
    assert abs(report["augmented_point"] - report["point"]) < 0.05
    assert report["ci_low"] <= report["point"] <= report["ci_high"]
    assert len(report["splits"]) == 3
    for split in report["splits"]:
        assert {f["estimate_fold"] for f in split["folds"]} == {0, 1}
    table = report["imbalance"][0]
    assert table["side"] == "att"
    assert len(table["initial"]) == len(table["columns"]) == 2


def test_estimate_weight_csv_covers_folds(toy_csv, tmp_path, capsys):
    wpath = tmp_path / "w.csv"
    code = main(
        [
            "estimate",
            "--data",
            toy_csv,
            "--splits",
            "2",
            "--weights-out",
            str(wpath),
        ]
    )
    assert code == 0
    capsys.readouterr()
    rows = _read_weight_file(wpath)
    splits = {r["split"] for r in rows}
    folds = {r["fold"] for r in rows}
    assert splits == {"0", "1"}
    assert folds == {"0", "1"}
    ds = read_csv(toy_csv)
    # each split covers every control unit exactly once across its folds
    for s in splits:
        units = sorted(int(r["unit_index"]) for r in rows if r["split"] == s)
        controls = sorted(int(ds.order[i]) for i in ds.control_rows())
        assert units == controls


# ----------------------------------------------------------------------
# diagnose subcommand
# ----------------------------------------------------------------------


def _uniform_weight_csv(tmp_path, ds):
    path = tmp_path / "uni.csv"
    lines = ["unit_index,weight,fold,split"]
    for internal in ds.control_rows():
        lines.append(f"{int(ds.order[internal])},1.0,-1,-1")
    _write(path, "\n".join(lines) + "\n")
    return str(path)


def test_diagnose_uniform_weights_imbalance(toy_csv, tmp_path, capsys):
    ds = read_csv(toy_csv)
    wpath = _uniform_weight_csv(tmp_path, ds)
    code = main(["diagnose", "--data", toy_csv, "--weights", wpath])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    table = payload["report"]["imbalance"][0]
    # uniform weights: weighted imbalance equals the raw mean difference
    raw = ds.x[ds.d == 1].mean(axis=0) - ds.x[ds.d == 0].mean(axis=0)
    assert np.allclose(table["weighted"], raw, atol=1e-12)
    assert np.allclose(table["initial"], table["weighted"], atol=1e-15)


def test_diagnose_zero_variance_fit(noiseless_csv, tmp_path, capsys):
    ds = read_csv(noiseless_csv)
    wpath = _uniform_weight_csv(tmp_path, ds)
    code = main(["diagnose", "--data", noiseless_csv, "--weights", wpath])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    tfi = payload["report"]["tfi"]
    assert tfi["chi_sq_term"] == pytest.approx(0.0, abs=1e-12)
    assert tfi["total"] == pytest.approx(tfi["prediction_term"], abs=1e-12)


def test_diagnose_tfb_weights_roundtrip(toy_csv, tmp_path, capsys):
    # solver weights piped back into diagnose reproduce the TFI report
    wpath = tmp_path / "w.csv"
    assert main(["weights", "--data", toy_csv, "--weights-out", str(wpath)]) == 0
    solver_tfi = json.loads(capsys.readouterr().out)["report"]["tfi"]
    assert main(["diagnose", "--data", toy_csv, "--weights", str(wpath)]) == 0
    diag_tfi = json.loads(capsys.readouterr().out)["report"]["tfi"]
    assert diag_tfi["total"] == pytest.approx(solver_tfi["total"], abs=1e-9)
    assert diag_tfi["chi_sq_term"] == pytest.approx(
        solver_tfi["chi_sq_term"], abs=1e-9
    )
    assert diag_tfi["prediction_term"] == pytest.approx(
        solver_tfi["prediction_term"], abs=1e-9
    )


def test_diagnose_misaligned_weights(toy_csv, tmp_path, capsys):
    ds = read_csv(toy_csv)
    controls = [int(ds.order[i]) for i in ds.control_rows()]
    path = tmp_path / "short.csv"
    lines = ["unit_index,weight"]
    for unit in controls[:-1]:  # one control missing
        lines.append(f"{unit},1.0")
    _write(path, "\n".join(lines) + "\n")
    code = main(["diagnose", "--data", toy_csv, "--weights", str(path)])
    capsys.readouterr()
    assert code == 2

    lines.append(f"{controls[0]},1.0")  # duplicate
    _write(path, "\n".join(lines) + "\n")
    code = main(["diagnose", "--data", toy_csv, "--weights", str(path)])
    capsys.readouterr()
    assert code == 2


# ----------------------------------------------------------------------
# simulate subcommand
# ----------------------------------------------------------------------


def test_simulate_dim_smoke(tmp_path, capsys):
    out = tmp_path / "sim.json"
    rep = tmp_path / "reps.csv"
    code = main(
        [
            "simulate",
            "--dgp",
            "2",
            "--n",
            "200",
            "--reps",
            "10",
            "--methods",
            "dim",
            "--seed",
            "7",
            "--out",
            str(out),
            "--replicate-csv",
            str(rep),
        ]
    )
    capsys.readouterr()
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["schema_version"] == "1"
    assert payload["config"]["dgp"] == "2" and payload["config"]["seed"] == 7
    metrics = payload["metrics"]
    assert metrics["methods"]["dim"]["successes"] == 10
    rows = _read_weight_file(rep)  # same DictReader helper works for any CSV
    assert len(rows) == 10
    assert all(r["method"] == "dim" for r in rows)


def test_simulate_deterministic(tmp_path, capsys):
    out = tmp_path / "sim.json"
    args = [
        "simulate",
        "--dgp",
        "1",
        "--n",
        "100",
        "--reps",
        "3",
        "--methods",
        "dim,ebal",
        "--out",
        str(out),
    ]
    assert main(args) == 0
    first = out.read_bytes()
    assert main(args) == 0
    capsys.readouterr()
    assert out.read_bytes() == first


def test_simulate_unknown_method(capsys):
    code = main(
        ["simulate", "--dgp", "2", "--n", "100", "--reps", "2", "--methods", "kom"]
    )
    captured = capsys.readouterr()
    assert code == 2
    error = json.loads(captured.err)["error"]
    assert "kom" in error["message"]
    for name in ("dim", "ebal", "abal1", "oracle_ps", "tfb_ols"):
        assert name in error["message"]


# ----------------------------------------------------------------------
# exit codes and error objects
# ----------------------------------------------------------------------


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["estimate"])  # missing --data
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1


def test_missing_file_exit_2(capsys):
    code = main(["estimate", "--data", "/nonexistent/file.csv", "--splits", "1"])
    captured = capsys.readouterr()
    assert code == 2
    assert json.loads(captured.err)["error"]["type"] == "io"


def test_data_error_exit_2(tmp_path, capsys):
    path = _write(tmp_path / "bad.csv", "y,d,x1\n1,0,0.5\n2,3,1.5\n")
    code = main(["estimate", "--data", path, "--splits", "1"])
    captured = capsys.readouterr()
    assert code == 2
    assert json.loads(captured.err)["error"]["type"] == "data"


def test_numerical_error_exit_3(tmp_path, capsys):
    # duplicated covariate column: the OLS design is rank-deficient
    rng = np.random.default_rng(3)
    lines = ["y,d,x1,x2"]
    for i in range(12):
        x = rng.normal()
        lines.append(f"{rng.normal()},{i % 2},{x},{x}")
    path = _write(tmp_path / "rank.csv", "\n".join(lines) + "\n")
    wpath = tmp_path / "w.csv"
    code = main(["weights", "--data", path, "--weights-out", str(wpath)])
    captured = capsys.readouterr()
    assert code == 3
    assert json.loads(captured.err)["error"]["type"] == "numerical"


def test_bad_lambda_grid_exit_2(toy_csv, capsys):
    code = main(
        [
            "estimate",
            "--data",
            toy_csv,
            "--splits",
            "1",
            "--backend",
            "lasso",
            "--lambda-grid",
            "not-a-number",
        ]
    )
    captured = capsys.readouterr()
    assert code == 2
    assert "lambda-grid" in json.loads(captured.err)["error"]["message"]


# ----------------------------------------------------------------------
# survey-data shaped end-to-end run (structural, no numeric gate)
# ----------------------------------------------------------------------


def test_jobs_study_shape_krls_end_to_end(tmp_path, capsys):
    # ten covariates shaped like a classic employment-program evaluation
    # file: demographics, indicators, and prior earnings
    rng = np.random.default_rng(17)
    n = 60
    age = rng.integers(17, 56, size=n)
    educ = rng.integers(3, 17, size=n)
    black = rng.integers(0, 2, size=n)
    hisp = (1 - black) * rng.integers(0, 2, size=n)
    married = rng.integers(0, 2, size=n)
    nodegree = (educ < 12).astype(int)
    re74 = np.round(rng.uniform(0, 40000, size=n) * rng.integers(0, 2, size=n), 2)
    re75 = np.round(rng.uniform(0, 40000, size=n) * rng.integers(0, 2, size=n), 2)
    u74 = (re74 == 0).astype(int)
    u75 = (re75 == 0).astype(int)
    d = np.r_[np.zeros(n // 2, dtype=int), np.ones(n - n // 2, dtype=int)]
    y = np.round(rng.uniform(0, 60000, size=n), 2)
    header = "y,d,age,educ,black,hisp,married,nodegree,re74,re75,u74,u75"
    lines = [header]
    for i in range(n):
        lines.append(
            f"{y[i]},{d[i]},{age[i]},{educ[i]},{black[i]},{hisp[i]},"
            f"{married[i]},{nodegree[i]},{re74[i]},{re75[i]},{u74[i]},{u75[i]}"
        )
    path = _write(tmp_path / "jobs.csv", "\n".join(lines) + "\n")
    code = main(
        [
            "estimate",
            "--data",
            path,
            "--backend",
            "krls",
            "--standardize",
            "--splits",
            "2",
        ]
    )
    captured = capsys.readouterr()
    assert code == 0
    payload = json.loads(captured.out)
    report = payload["report"]
    assert report["backend"] == "krls"
    assert np.isfinite(report["point"])
    assert report["ci_low"] <= report["point"] <= report["ci_high"]
    assert len(report["splits"]) == 2
