import json

import numpy as np
import pytest

from mvstoch.cli import main


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def fubini_config(tmp_path, **overrides):
    cfg = {
        "time": {"T": 1.0, "N": 32},
        "grid": {"J": 32},
        "scenarios": {"mode": "monte_carlo", "count": 20, "seed": 99},
        "driver": {"kind": "brownian"},
        "integrand": {"kind": "power_law", "alpha": 1.0},
        "test_family": {"k_max": 8},
        "tolerances": {"fubini": 1e-10},
    }
    cfg.update(overrides)
    return write_config(tmp_path, "fubini.json", cfg)


class TestFubiniCommand:
    def test_power_law_passes(self, tmp_path):
        cfg = fubini_config(tmp_path)
        out = tmp_path / "out"
        assert main(["fubini", "--config", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["pass"] and summary["schema_version"] == 1
        assert (out / "fubini_report.csv").exists()

    def test_elementary_passes_tight_tolerance(self, tmp_path):
        cfg = fubini_config(
            tmp_path,
            integrand={"kind": "random_elementary", "count": 3, "seed": 5},
            tolerances={"fubini": 1e-12},
        )
        assert main(["fubini", "--config", cfg, "--out", str(tmp_path / "o")]) == 0

    def test_corrupted_comparison_fails(self, tmp_path):
        cfg = fubini_config(tmp_path, corrupt_comparison=True)
        assert main(["fubini", "--config", cfg, "--out", str(tmp_path / "bad")]) == 1
        summary = json.loads((tmp_path / "bad" / "summary.json").read_text())
        assert not summary["pass"]

    def test_deterministic_outputs(self, tmp_path):
        cfg = fubini_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["fubini", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["fubini", "--config", cfg, "--out", str(out2)]) == 0
        assert (out1 / "fubini_report.csv").read_bytes() == (out2 / "fubini_report.csv").read_bytes()
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_seed_override_changes_report(self, tmp_path):
        cfg = fubini_config(tmp_path, integrand={"kind": "random_dominated"})
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert main(["fubini", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["fubini", "--config", cfg, "--out", str(out2), "--seed", "123"]) == 0
        assert (out1 / "fubini_report.csv").read_bytes() != (out2 / "fubini_report.csv").read_bytes()

    def test_bad_config_exits_two(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["fubini", "--config", str(path)]) == 2

    def test_missing_time_block_exits_two(self, tmp_path):
        cfg = write_config(tmp_path, "incomplete.json",
                           {"scenarios": {"mode": "monte_carlo", "count": 2, "seed": 1}})
        assert main(["fubini", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


class TestApproxCommand:
    def approx_config(self, tmp_path, **overrides):
        cfg = {
            "time": {"T": 4.0, "N": 3},
            "grid": {"J": 8, "T_K": 1.0},
            "scenarios": {"mode": "tree", "branching": 2, "depth": 3},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "random_lattice", "count": 1, "seed": 2024, "ball": 1.0},
            "schedule": [4, 16, 64],
            "tolerances": {"approx_q": 1e-6},
        }
        cfg.update(overrides)
        return write_config(tmp_path, "approx.json", cfg)

    def test_pipeline_passes(self, tmp_path):
        cfg = self.approx_config(tmp_path)
        out = tmp_path / "out"
        assert main(["approx", "--config", cfg, "--out", str(out)]) == 0
        body = (out / "approx_report.csv").read_text().strip().splitlines()
        assert body[0].startswith("integrand,n,net_size,q_error,r_error")
        assert len(body) == 4  # header + three net sizes

    def test_monte_carlo_rejected(self, tmp_path):
        cfg = self.approx_config(
            tmp_path, scenarios={"mode": "monte_carlo", "count": 8, "seed": 1})
        assert main(["approx", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestVolterraCommand:
    def volterra_config(self, tmp_path, **overrides):
        cfg = {
            "time": {"T": 1.0, "N": 128},
            "scenarios": {"mode": "monte_carlo", "count": 30, "seed": 7},
            "driver": {"kind": "brownian"},
            "kernels": [{"name": "power_alpha", "alpha": 0.75}, {"name": "affine"}],
            "alphas": [0.25],
            "diagnostic": {"n_steps": 1024, "scenarios": 100, "levels": 5, "seed": 3},
            "tolerances": {"decomposition": 1e-10},
        }
        cfg.update(overrides)
        return write_config(tmp_path, "volterra.json", cfg)

    def test_decomposition_and_slopes(self, tmp_path):
        cfg = self.volterra_config(tmp_path)
        out = tmp_path / "out"
        assert main(["volterra", "--config", cfg, "--out", str(out)]) == 0
        slopes = (out / "volterra_slopes.csv").read_text().strip().splitlines()
        assert slopes[0] == "alpha,slope"
        assert len(slopes) == 2

    def test_unknown_kernel_exits_two(self, tmp_path):
        cfg = self.volterra_config(tmp_path, kernels=[{"name": "nope"}])
        assert main(["volterra", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestExample7Command:
    def test_single_alpha_report(self, tmp_path):
        cfg = write_config(tmp_path, "ex7.json", {
            "time": {"T": 1.0, "N": 256},
            "grid": {"J": 256},
            "scenarios": {"seed": 11},
            "alphas": [1.0],
            "isometry": {"scenarios": 20000, "n_steps": 1024},
            "diagnostic": {"n_steps": 1024, "scenarios": 100, "levels": 5},
        })
        out = tmp_path / "out"
        assert main(["example7", "--config", cfg, "--out", str(out)]) == 0
        body = (out / "example7_report.csv").read_text().strip().splitlines()
        assert len(body) == 2
        row = body[1].split(",")
        assert row[0] == "1"
        assert row[4] == "True"  # certificate for alpha > 1/2

    def test_nonpositive_alpha_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "ex7bad.json", {
            "time": {"T": 1.0, "N": 16},
            "alphas": [0.0],
        })
        assert main(["example7", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestConditionsCommand:
    def test_report_written(self, tmp_path):
        cfg = write_config(tmp_path, "cond.json", {
            "time": {"T": 1.0, "N": 128},
            "grid": {"J": 128},
            "scenarios": {"mode": "monte_carlo", "count": 4, "seed": 2},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "power_law", "alpha": 1.0},
        })
        out = tmp_path / "out"
        assert main(["conditions", "--config", cfg, "--out", str(out)]) == 0
        payload = json.loads((out / "conditions.json").read_text())
        assert {"c63", "c64", "c66", "c67", "c_veraar"} <= payload["conditions"].keys()
        assert payload["certificate"]["hypotheses_met"] is True


class TestElementaryFromConfig:
    def test_term_list_integrand(self, tmp_path):
        cfg = write_config(tmp_path, "elem.json", {
            "time": {"T": 1.0, "N": 16},
            "grid": {"J": 4},
            "scenarios": {"mode": "monte_carlo", "count": 10, "seed": 3},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "elementary", "terms": [
                {"weights": [[0.5, -0.5, 0.0, 1.0, 0.0]], "start": 0, "stop": 8},
                {"weights": [[0.0, 0.25, 0.0, 0.0, -1.0]], "start": 4, "stop": 16},
            ]},
            "tolerances": {"fubini": 1e-12},
        })
        assert main(["fubini", "--config", cfg, "--out", str(tmp_path / "o")]) == 0

    def test_bad_term_list(self, tmp_path):
        cfg = write_config(tmp_path, "elem_bad.json", {
            "time": {"T": 1.0, "N": 8},
            "grid": {"J": 4},
            "scenarios": {"mode": "monte_carlo", "count": 4, "seed": 3},
            "integrand": {"kind": "elementary", "terms": [{"weights": [[1.0]], "start": 0}]},
        })
        assert main(["fubini", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestThreadsFlagAndConditionGrowth:
    def test_threads_flag_does_not_change_output(self, tmp_path):
        cfg = fubini_config(tmp_path)
        out1, out2 = tmp_path / "t1", tmp_path / "t2"
        assert main(["fubini", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["fubini", "--config", cfg, "--out", str(out2), "--threads", "4"]) == 0
        assert (out1 / "fubini_report.csv").read_bytes() == (out2 / "fubini_report.csv").read_bytes()

    def test_conditions_report_carries_growth_ratios(self, tmp_path):
        cfg = write_config(tmp_path, "cond2.json", {
            "time": {"T": 1.0, "N": 64},
            "grid": {"J": 64},
            "scenarios": {"mode": "monte_carlo", "count": 2, "seed": 2},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "power_law", "alpha": 0.25},
        })
        out = tmp_path / "out"
        assert main(["conditions", "--config", cfg, "--out", str(out)]) == 0
        payload = json.loads((out / "conditions.json").read_text())
        for key in ("c63", "c64", "c66", "c67", "c_veraar"):
            assert "growth_ratio" in payload["conditions"][key]
        # the square-density condition diverges under refinement below 1/2
        assert payload["conditions"]["c66"]["growth_ratio"] > 1.5
        assert payload["certificate"]["hypotheses_met"] is False


class TestDeterminismAcrossSubcommands:
    def test_approx_outputs_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "approx_det.json", {
            "time": {"T": 4.0, "N": 3},
            "grid": {"J": 8, "T_K": 1.0},
            "scenarios": {"mode": "tree", "branching": 2, "depth": 3},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "random_lattice", "count": 1, "seed": 2024, "ball": 1.0},
            "schedule": [4, 16, 64],
        })
        out1, out2 = tmp_path / "a1", tmp_path / "a2"
        assert main(["approx", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["approx", "--config", cfg, "--out", str(out2)]) == 0
        assert (out1 / "approx_report.csv").read_bytes() == (out2 / "approx_report.csv").read_bytes()

    def test_conditions_outputs_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "cond_det.json", {
            "time": {"T": 1.0, "N": 64},
            "grid": {"J": 64},
            "scenarios": {"mode": "monte_carlo", "count": 2, "seed": 5},
            "driver": {"kind": "brownian"},
            "integrand": {"kind": "power_law", "alpha": 1.0},
        })
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        assert main(["conditions", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["conditions", "--config", cfg, "--out", str(out2)]) == 0
        assert (out1 / "conditions.json").read_bytes() == (out2 / "conditions.json").read_bytes()
