import csv

import pytest

from src.core.exceptions import ConfigurationError
from src.main import main
from src.schemas.run import RunConfig
from src.services import sweeps


def _read(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_parse_assignments_skips_comments_and_blank_lines():
    text = "# engine\nmodel = 2qe-local\n\np = 2   # fast baths\n"
    assert sweeps.parse_assignments(text) == {"model": "2qe-local", "p": "2"}
    with pytest.raises(ConfigurationError):
        sweeps.parse_assignments("p 2")


def test_unknown_keys_are_configuration_errors():
    with pytest.raises(ConfigurationError):
        RunConfig.from_assignments({"temperature": "3"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_assignments({"model": "flywheel", "g": "1"})
    with pytest.raises(ConfigurationError):
        sweeps.load_preset("fig9")


def test_overrides_take_precedence_over_preset_and_file(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("sweep_count = 5\np = 2\n", encoding="utf-8")
    run = sweeps.load_run_config("fig2", str(config), ["sweep_count=3"])
    assert run.models == ("2qe-reset", "2qe-local", "3qe-effective")
    assert run.sweep.count == 3
    assert run.params["p"] == 2.0
    assert len(run.points()) == 3


def test_engine_params_from_bias_assignment():
    run = RunConfig.from_assignments({"chi": "1.5", "beta1E1": "3", "g_over_p": "0.5", "p": "2"})
    params = run.engine_params()
    assert params.chi == pytest.approx(1.5)
    assert params.g == pytest.approx(1.0)


def test_multi_model_runs_get_one_file_per_model(tmp_path):
    run = RunConfig.from_assignments({"model": "2qe-reset, 2qe-local", "out": str(tmp_path / "fig.csv")})
    paths = sweeps.output_paths(run, "sweep")
    assert paths["2qe-local"].name == "fig_2qe-local.csv"


def test_format_cell():
    assert sweeps.format_cell(None) == ""
    assert sweeps.format_cell(True) == "true"
    assert sweeps.format_cell(float("nan")) == "nan"
    assert sweeps.format_cell(1 / 3) == "0.333333333333"


def test_flywheel_sweep_writes_rows(tmp_path):
    out = tmp_path / "fig5.csv"
    assert main(["sweep", "--preset", "fig5", "--set", "sweep_count=3", "--out", str(out)]) == 0
    rows = _read(out)
    assert len(rows) == 3
    assert list(rows[0]) == sweeps.FLYWHEEL_COLUMNS
    for row in rows:
        assert float(row["tur_coherent"]) == pytest.approx(3 * float(row["tur_fock"]))
        assert float(row["tur_fock"]) <= float(row["tur_ct"])


def test_engine_sweep_matches_closed_forms(tmp_path):
    out = tmp_path / "reset.csv"
    code = main(["sweep", "--set", "model=2qe-reset", "--set", "sweep=g_over_p", "--set", "sweep_start=1",
                 "--out", str(out), "--jobs", "1"])
    assert code == 0
    (row,) = _read(out)
    assert row["status"] == "ok"
    assert float(row["rel_dev_W_dot"]) < 1e-2
    assert float(row["W_dot_analytic"]) == pytest.approx(0.073838, rel=1e-5)


def test_flywheel_monte_carlo_command(tmp_path):
    out = tmp_path / "mc.csv"
    code = main(["flywheel-mc", "--set", "trials=500", "--set", "N=20", "--set", "checkpoints=5,10",
                 "--seed", "3", "--out", str(out)])
    assert code == 0
    rows = _read(out)
    assert [int(r["N"]) for r in rows] == [5, 10, 20]
    assert list(rows[0]) == sweeps.MC_COLUMNS


def test_exit_codes_for_bad_input(tmp_path):
    assert main(["sweep", "--set", "bogus=1", "--out", str(tmp_path / "a.csv")]) == 2
    assert main(["sweep", "--config", str(tmp_path / "missing.conf")]) == 2
    assert main(["sweep", "--set", "p=-1", "--out", str(tmp_path / "b.csv")]) == 1
    assert main(["flywheel-mc", "--set", "model=2qe-reset"]) == 2
    assert main(["no-such-command"]) == 2


def test_narrow_window_exits_with_numerical_code(tmp_path):
    out = tmp_path / "leak.csv"
    code = main(["sweep", "--set", "n_min=-3", "--set", "n_max=3", "--set", "g_over_p=1", "--out", str(out)])
    assert code == 3
    (row,) = _read(out)
    assert row["status"].startswith("FAILED: IntegrationAborted")


def test_validate_refuses_flywheel_model(tmp_path):
    assert main(["validate", "--set", "model=flywheel", "--out", str(tmp_path / "v.csv")]) == 2


@pytest.mark.slow
def test_quick_validation_suite_passes(tmp_path):
    out = tmp_path / "validate_quick.csv"
    assert main(["validate", "--level", "quick", "--out", str(out)]) == 0
    rows = _read(out)
    assert rows and all(row["passed"] == "true" for row in rows)
    assert list(rows[0]) == sweeps.VALIDATION_COLUMNS


def test_checkpoints_beyond_walk_length_are_configuration_errors(tmp_path):
    out = tmp_path / "mc.csv"
    assert main(["flywheel-mc", "--set", "N=20", "--set", "checkpoints=50", "--out", str(out)]) == 2
    assert main(["flywheel-mc", "--set", "N=20", "--set", "checkpoints=-1", "--out", str(out)]) == 2
    assert not out.exists()


def test_failed_monte_carlo_leaves_a_marker_row(tmp_path):
    out = tmp_path / "mc.csv"
    params = RunConfig.from_assignments({"model": "flywheel", "N": "20"}).flywheel_params()
    with pytest.raises(ValueError):
        sweeps.write_flywheel_mc(out, params, trials=10, seed=1, checkpoints=[50])
    (row,) = _read(out)
    assert row["status"].startswith("FAILED: ValueError")
    assert row["N"] == "20"
