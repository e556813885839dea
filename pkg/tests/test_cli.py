"""Command-line workflows: configs, reports, persistence, sweeps."""

import csv
import json

import pytest

from pekar.cli import (ConfigError, load_config, main, report_schema,
                       validate_report)
from pekar.scf import save_solution

SMALL_CONFIG = """\
side_length_L = 1.0
grid_points_n = 16
cutoff_Lambda = 7.6
tolerance_scf = 1e-10
"""


def write_config(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run_cli(args):
    return main([str(a) for a in args])


class TestConfig:
    def test_missing_required_field_named(self, tmp_path, capsys):
        p = write_config(tmp_path, "side_length_L = 1.0\n")
        rc = run_cli(["solve", "--config", p, "--out", tmp_path / "out"])
        assert rc == 1
        assert "grid_points_n" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        p = write_config(tmp_path, SMALL_CONFIG + "banana = 3\n")
        rc = run_cli(["solve", "--config", p, "--out", tmp_path / "out"])
        assert rc == 1
        assert "banana" in capsys.readouterr().err

    def test_odd_grid_rejected(self, tmp_path):
        p = write_config(tmp_path, "side_length_L = 1.0\ngrid_points_n = 15\n")
        with pytest.raises(ConfigError, match="even"):
            load_config(p)

    def test_nyquist_guard(self, tmp_path):
        p = write_config(tmp_path,
                         "side_length_L = 1.0\ngrid_points_n = 16\n"
                         "cutoff_Lambda = 1e9\n")
        with pytest.raises(ConfigError, match="Nyquist"):
            load_config(p)

    def test_missing_file(self, tmp_path, capsys):
        rc = run_cli(["solve", "--config", tmp_path / "nope.toml",
                      "--out", tmp_path / "out"])
        assert rc == 1


class TestSolveCommand:
    def test_small_box_solve(self, tmp_path):
        p = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert run_cli(["solve", "--config", p, "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        validate_report(report)
        assert report["results"]["regime"] == "ConstantMinimizer"
        assert abs(report["results"]["e_L"]) <= 1e-10
        assert (out / "solution" / "psi.pekr").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert "report.json" in manifest["solve"]

    def test_seed_reproducibility(self, tmp_path):
        p = write_config(tmp_path, SMALL_CONFIG)
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert run_cli(["solve", "--config", p, "--out", out,
                            "--seed", 7]) == 0
            rep = json.loads((out / "report.json").read_text())
            rep.pop("timing_seconds")
            outs.append(json.dumps(rep, sort_keys=True))
        assert outs[0] == outs[1]

    def test_nonconvergence_exit_code(self, tmp_path):
        cfg = ("side_length_L = 360.0\ngrid_points_n = 10\n"
               "max_outer_iterations = 1\ntolerance_scf = 1e-12\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["solve", "--config", p, "--out", out]) == 2
        partial = json.loads((out / "report.json").read_text())
        assert partial["status"] == "non-convergence"


class TestCorrectionCommand:
    def test_small_box_crosscheck(self, tmp_path):
        # the doubling window must leave room for the eigenvalue-tail model
        cfg = ("side_length_L = 1.0\ngrid_points_n = 16\n"
               "cutoff_Lambda = 20.1\ntolerance_scf = 1e-10\n"
               "check_lambda_doubling = true\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["correction", "--config", p, "--out", out]) == 0
        rep = json.loads((out / "report.json").read_text())
        res = rep["results"]
        assert res["small_l_crosscheck_delta"] <= 1e-8
        assert res["trace_correction"] > 0
        assert res["lambda_stable"] is True
        assert (out / "spectrum.csv").exists()

    def test_localized_correction_positive(self, tmp_path, loc_solution):
        sol_dir = tmp_path / "sol"
        save_solution(sol_dir, loc_solution)
        cfg = (f"side_length_L = {loc_solution.lattice.L}\n"
               f"grid_points_n = {loc_solution.lattice.n}\n"
               "cutoff_Lambda = 0.08\n"
               f"solution_dir = '{sol_dir}'\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["correction", "--config", p, "--out", out]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["results"]["trace_correction"] > 0
        assert rep["results"]["regime"] == "LocalizedMinimizer"

    def test_requires_cutoff(self, tmp_path, capsys):
        p = write_config(tmp_path, "side_length_L = 1.0\ngrid_points_n = 16\n")
        rc = run_cli(["correction", "--config", p, "--out", tmp_path / "o"])
        assert rc == 1
        assert "cutoff_Lambda" in capsys.readouterr().err


class TestOtherCommands:
    def test_small_l_command(self, tmp_path):
        p = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert run_cli(["small-l", "--config", p, "--out", out]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["results"]["small_l_value"] > 0
        assert rep["results"]["tail_bound"] > 0

    def test_orbit_command(self, tmp_path, loc_solution):
        sol_dir = tmp_path / "sol"
        save_solution(sol_dir, loc_solution)
        cfg = (f"side_length_L = {loc_solution.lattice.L}\n"
               f"grid_points_n = {loc_solution.lattice.n}\n"
               "cutoff_Lambda = 0.08\nweight_T = 1.0\n"
               f"solution_dir = '{sol_dir}'\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["orbit", "--config", p, "--out", out]) == 0
        dec = json.loads((out / "decomposition.json").read_text())
        assert set(dec) == {"y", "dist", "T", "ortho_residual"}
        assert (out / "v.pekr").exists()
        rep = json.loads((out / "report.json").read_text())
        assert rep["results"]["reconstruction_error"] <= 1e-9
        assert rep["results"]["dist"] > 0

    def test_hessian_command(self, tmp_path):
        p = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert run_cli(["hessian", "--config", p, "--out", out]) == 0
        assert (out / "K.pekm").exists()
        assert (out / "spectrum.csv").exists()

    def test_diagnostics_command(self, tmp_path):
        p = write_config(tmp_path, "side_length_L = 6.283185307179586\n"
                                   "grid_points_n = 16\n")
        out = tmp_path / "out"
        assert run_cli(["diagnostics", "--config", p, "--out", out]) == 0
        fits = json.loads((out / "fits.json").read_text())
        assert abs(fits["ly_11_vs_Lambda"]["slope"] + 3.0) <= 0.15
        assert abs(fits["gross_g2_vs_K"]["slope"] - 1.0) <= 0.15
        rows = list(csv.DictReader(open(out / "sums.csv")))
        assert {"sum", "parameter", "value"} == set(rows[0])


class TestSweep:
    def test_single_point_matches_solve(self, tmp_path):
        cfg = SMALL_CONFIG + ("sweep_parameter = 'side_length_L'\n"
                              "sweep_values = [1.0]\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["sweep", "--config", p, "--out", out]) == 0
        rows = list(csv.DictReader(open(out / "sweep.csv")))
        assert len(rows) == 1
        assert rows[0]["status"] == "ok"
        assert abs(float(rows[0]["e_L"])) <= 1e-10
        solve_out = tmp_path / "solve_out"
        assert run_cli(["solve", "--config",
                        write_config(tmp_path, SMALL_CONFIG, "s.toml"),
                        "--out", solve_out]) == 0
        rep = json.loads((solve_out / "report.json").read_text())
        assert float(rows[0]["e_L"]) == pytest.approx(rep["results"]["e_L"],
                                                      abs=1e-14)

    def test_resume_skips_done_rows(self, tmp_path):
        cfg = SMALL_CONFIG + ("sweep_parameter = 'side_length_L'\n"
                              "sweep_values = [1.0, 1.2]\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["sweep", "--config", p, "--out", out]) == 0
        rows1 = list(csv.DictReader(open(out / "sweep.csv")))
        stamp = (out / "sweep.csv").read_text()
        assert run_cli(["sweep", "--config", p, "--out", out]) == 0
        assert (out / "sweep.csv").read_text() == stamp
        assert len(rows1) == 2

    def test_failures_recorded_and_continue(self, tmp_path):
        # 8 outer iterations suffice in the small box but not at L = 360
        cfg = ("side_length_L = 360.0\ngrid_points_n = 10\n"
               "max_outer_iterations = 8\ntolerance_scf = 1e-9\n"
               "sweep_parameter = 'side_length_L'\n"
               "sweep_values = [1.0, 360.0]\n")
        p = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert run_cli(["sweep", "--config", p, "--out", out]) == 0
        rows = {float(r["parameter"]): r for r in
                csv.DictReader(open(out / "sweep.csv"))}
        assert rows[1.0]["status"] == "ok"
        assert rows[360.0]["status"].startswith("failed")


class TestReportFormat:
    def test_schema_is_shipped(self):
        schema = report_schema()
        assert schema["properties"]["schema_version"]["const"] == 1

    def test_float_formatting(self):
        from pekar.cli import _format_json

        # 17 significant digits, deterministic layout
        assert _format_json({"x": 0.1}) == '{\n  "x": 0.10000000000000001\n}'
        assert _format_json([1.0, 2]) == "[\n  1,\n  2\n]"
        with pytest.raises(ValueError, match="non-finite"):
            _format_json({"x": float("nan")})
