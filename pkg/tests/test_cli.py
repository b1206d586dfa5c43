import numpy as np
import pytest
import yaml

from adaptive_pension.cli import Artifact, cmd_report, main, percentile_bands
from adaptive_pension.config import DEFAULT_CONFIG
from adaptive_pension.engine import MetricsReport
from adaptive_pension.errors import SchemaError
from adaptive_pension.mortality import COVARIATE_NAMES, BaselineHazard, read_model, simulate_cohort_records, \
    write_survival_records
from adaptive_pension.policy import read_table

CFG = str(DEFAULT_CONFIG)
SMALL = ["--set", "demographics.size=60", "--set", "simulation.n_scenarios=20", "--set", "simulation.years=5",
         "--set", "simulation.horizon=10"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for preset in "ABCD":
        d = root / preset
        assert run("simulate", CFG, "--set", f"plan.preset={preset}", *SMALL, "--out", d) == 0
        out[preset] = d
    return out


def test_validate(capsys):
    assert run("validate", CFG) == 0
    assert capsys.readouterr().out.startswith("ok: preset D")


def test_plan_a_simulation_has_no_payout_freedom(artifacts):
    m = MetricsReport.from_text((artifacts["A"] / "metrics.txt").read_text())
    assert m.q_bar == 100.0 and m.delta_q == 0.0
    assert {p.name for p in artifacts["A"].iterdir()} >= {"metrics.txt", "policy.txt", "trajectory.csv",
                                                           "config.yaml", "VERSION", "artifact.txt"}


def test_simulate_twice_is_byte_identical(tmp_path, artifacts):
    assert run("simulate", CFG, "--set", "plan.preset=B", *SMALL, "--set", "simulation.workers=3",
               "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / "metrics.txt").read_bytes() == (artifacts["B"] / "metrics.txt").read_bytes()
    assert (tmp_path / "b" / "trajectory.csv").read_bytes() == (artifacts["B"] / "trajectory.csv").read_bytes()


def test_config_snapshot_reproduces_the_metrics(tmp_path, artifacts):
    assert run("simulate", artifacts["C"] / "config.yaml", "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / "metrics.txt").read_bytes() == (artifacts["C"] / "metrics.txt").read_bytes()


def test_simulate_accepts_a_policy_file(tmp_path, artifacts):
    assert run("simulate", CFG, "--set", "plan.preset=A", *SMALL, "--policy", artifacts["A"] / "policy.txt",
               "--out", tmp_path / "a") == 0
    assert (tmp_path / "a" / "metrics.txt").read_bytes() == (artifacts["A"] / "metrics.txt").read_bytes()


def test_missing_covariance_exits_with_validation_error(tmp_path, capsys):
    raw = yaml.safe_load(DEFAULT_CONFIG.read_text())
    del raw["universe"]["covariance"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(raw, sort_keys=False))
    assert run("validate", bad) == 1
    err = capsys.readouterr().err
    assert "universe" in err and "covariance" in err


def test_plan_a_tuning_keeps_the_initial_table(tmp_path):
    d = tmp_path / "tuneA"
    assert run("tune", CFG, "--set", "plan.preset=A", *SMALL, "--out", d) == 0
    assert read_table(d / "policy.txt") == read_table(d / "initial_policy.txt")
    assert (d / "metrics_in_sample.txt").exists()
    log = (d / "tuning_log.txt").read_text().splitlines()
    assert log[0].startswith("# adaptive_pension tuning_log")
    assert all(not ln.endswith("\t1") for ln in log[2:-1])


def test_tune_is_reproducible_across_workers(tmp_path):
    args = ["--set", "plan.preset=B", *SMALL, "--set", "grids.payout_step=5", "--set", "tuning.max_sweeps=2"]
    assert run("tune", CFG, *args, "--out", tmp_path / "one") == 0
    assert run("tune", CFG, *args, "--set", "simulation.workers=2", "--out", tmp_path / "two") == 0
    for name in ("metrics.txt", "metrics_in_sample.txt", "policy.txt", "tuning_log.txt"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_report_tables_and_bands(tmp_path, artifacts, capsys):
    assert run("report", artifacts["A"]) == 0
    single = capsys.readouterr().out.splitlines()
    assert single[0] == "metric\tPlan A"
    assert run("report", *(artifacts[p] for p in "ABCD"), "--out", tmp_path / "rep") == 0
    text = (tmp_path / "rep" / "comparison.tsv").read_text().splitlines()
    assert text[0].split("\t") == ["metric", "Plan A", "Plan B", "Plan C", "Plan D"]
    labels = [ln.split("\t")[0] for ln in text[1:]]
    assert labels == ["Mean percent of target benefit",
                      "Probability of breaching A:L floor in one year (horizon)",
                      "Sum of ex post value of breaches as a percentage of initial funds",
                      "Learned breach A:L threshold"]
    for p in "ABCD":
        rows = (tmp_path / "rep" / f"ratio_bands_Plan_{p}.csv").read_text().splitlines()
        assert rows[0] == "year,p5,p25,p50,p75,p95"
        bands = np.array([[float(x) for x in r.split(",")[1:]] for r in rows[1:]])
        assert bands.shape == (6, 5)
        assert np.all(np.diff(bands, axis=1) >= 0)


def test_percentile_bands_ignore_missing_values():
    paths = np.array([[1.0, np.nan], [2.0, 3.0], [3.0, np.nan]])
    b = percentile_bands(paths)
    assert b[0].tolist() == [1.0, 1.0, 2.0, 3.0, 3.0]
    assert b[1].tolist() == [3.0] * 5


def test_report_rejects_other_schema_versions(tmp_path, artifacts, capsys):
    import shutil
    old = tmp_path / "old"
    shutil.copytree(artifacts["A"], old)
    (old / "artifact.txt").write_text("# adaptive_pension artifact v0\nkind = simulate\n")
    with pytest.raises(SchemaError, match="not supported"):
        Artifact.read(old)
    assert run("report", old) == 1
    assert "not supported" in capsys.readouterr().err
    with pytest.raises(SchemaError):
        cmd_report([tmp_path])


def test_fit_mortality_recovers_coefficients(tmp_path):
    theta = np.array([-0.3, -0.5, -0.8, -0.1, -0.2, -0.3, 0.1, 0.0, -0.1])
    recs = simulate_cohort_records(theta, BaselineHazard.gompertz(), 20000, seed=4)
    write_survival_records(tmp_path / "r.csv", recs)
    from adaptive_pension.mortality import write_life_table
    write_life_table(tmp_path / "lt.txt", BaselineHazard.gompertz())
    assert run("fit-mortality", tmp_path / "r.csv", "--life-table", tmp_path / "lt.txt",
               "--out", tmp_path / "m.txt") == 0
    fitted, betas = read_model(tmp_path / "m.txt")
    assert max(abs(fitted[n] - t) for n, t in zip(COVARIATE_NAMES, theta)) <= 0.1
    assert betas == pytest.approx({"poor": 322.0, "lower_middle": 748.0, "upper_middle": 1394.0, "rich": 2880.0})
    # the fitted file plugs straight back into an experiment
    assert run("validate", CFG, "--set", f"mortality.model={tmp_path / 'm.txt'}") == 0


def test_fit_mortality_failures(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    write_survival_records(empty, [])
    assert run("fit-mortality", empty, "--out", tmp_path / "m.txt") == 1
    recs = simulate_cohort_records(np.zeros(9), BaselineHazard.gompertz(), 200, seed=1)
    censored = [r.__class__(r.t0, r.T, 0, r.covariates, income=r.income, income_bin=r.income_bin) for r in recs]
    write_survival_records(tmp_path / "c.csv", censored)
    capsys.readouterr()
    assert run("fit-mortality", tmp_path / "c.csv", "--out", tmp_path / "m.txt") == 2
    assert "NonIdentifiable" in capsys.readouterr().err
    assert run("fit-mortality", tmp_path / "nope.csv", "--out", tmp_path / "m.txt") == 1
