import json
import os

import numpy as np
import pytest
import yaml

from voltctrl.cli import main
from voltctrl.config import (
    ConfigError,
    apply_overrides,
    emit_config,
    load_config,
    parse_config_text,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def single_bus_config(tmp_path, **scenario_extra):
    net = {
        "schema_version": 1,
        "buses": 1,
        "v0": 1.0,
        "lines": [{"from": 0, "to": 1, "r": 0.5, "x": 0.5}],
    }
    net_path = tmp_path / "net.yaml"
    net_path.write_text(yaml.safe_dump(net))
    cfg = {
        "schema_version": 1,
        "seed": 0,
        "network": "net.yaml",
        "output_dir": str(tmp_path / "out"),
        "controller": {
            "alpha": 0.3,
            "beta": 0.3,
            "gamma": 0.3,
            "c": 1.0,
            "d": 0.0,
            "cost": {"a": 1.0, "b": 0.0},
        },
        "limits": {"q_low": -0.2, "q_high": 0.2, "v_low": 0.9025, "v_high": 1.1025},
        "scenario": {
            "plant": "linearized",
            "horizon": 2500,
            "profiles": {"kind": "static", "p": -0.08, "q_exo": -0.02},
            **scenario_extra,
        },
    }
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    return cfg_path, cfg


class TestConfig:
    def test_round_trip_bundled_examples(self):
        for name in os.listdir(CONFIG_DIR):
            if not name.endswith(".yaml") or name.endswith("_net.yaml"):
                continue
            text = open(os.path.join(CONFIG_DIR, name)).read()
            data = parse_config_text(text)
            assert parse_config_text(emit_config(data)) == data

    def test_round_trip_generated(self, tmp_path):
        _, cfg = single_bus_config(tmp_path)
        assert parse_config_text(emit_config(cfg)) == cfg

    def test_missing_network_file(self, tmp_path):
        cfg_path, cfg = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        data["network"] = "nope.yaml"
        cfg_path.write_text(yaml.safe_dump(data))
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(cfg_path)

    def test_syntax_error_line_reported(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("controller:\n  alpha: [unclosed\n")
        with pytest.raises(ConfigError, match="line"):
            load_config(path)

    def test_semantic_error_names_key(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        del data["controller"]["alpha"]
        cfg_path.write_text(yaml.safe_dump(data))
        with pytest.raises(ConfigError, match="controller.alpha"):
            load_config(cfg_path)

    def test_overrides(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        cfg = load_config(cfg_path, overrides={"scenario.horizon": "10", "seed": 7})
        assert cfg.scenario.horizon == 10
        assert cfg.seed == 7

    def test_override_helper(self):
        data = {"a": {"b": 1}}
        out = apply_overrides(data, {"a.b": "2", "a.c": "x"})
        assert out == {"a": {"b": 2, "c": "x"}}
        assert data == {"a": {"b": 1}}  # original untouched

    def test_non_strongly_convex_rejected(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        data["controller"]["cost"]["a"] = 0.0
        data["controller"]["d"] = 0.0
        cfg_path.write_text(yaml.safe_dump(data))
        with pytest.raises(ConfigError, match="convex"):
            load_config(cfg_path)

    def test_csv_profiles_through_config(self, tmp_path):
        from voltctrl.sim import Profiles, write_profiles_csv

        cfg_path, _ = single_bus_config(tmp_path)
        prof_path = tmp_path / "profiles.csv"
        write_profiles_csv(
            Profiles(p=np.full((4, 1), -0.08), q_exo=np.full((4, 1), -0.02)), prof_path
        )
        data = yaml.safe_load(cfg_path.read_text())
        data["scenario"]["profiles"] = {"kind": "csv", "path": str(prof_path)}
        data["scenario"]["horizon"] = 4
        cfg_path.write_text(yaml.safe_dump(data))
        cfg = load_config(cfg_path)
        assert cfg.scenario.profiles.p.shape == (4, 1)
        assert main(["run", str(cfg_path)]) == 0


class TestRunCommand:
    def test_single_bus_run_reports_known_solution(self, tmp_path, capsys):
        cfg_path, _ = single_bus_config(tmp_path)
        assert main(["run", str(cfg_path)]) == 0
        out_dir = tmp_path / "out"
        result = yaml.safe_load((out_dir / "result.yaml").read_text())
        assert result["metrics"]["final_q"][0] == pytest.approx(0.0025, abs=1e-6)
        assert result["metrics"]["capacity_ok"] is True
        assert result["metrics"]["convergence_tick"] is not None
        assert (out_dir / "summary.csv").exists()
        assert (out_dir / "trace.json").exists()
        assert result["config"]["schema_version"] == 1

    def test_missing_network_exit_2(self, tmp_path, capsys):
        cfg_path, _ = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        data["network"] = "missing.yaml"
        cfg_path.write_text(yaml.safe_dump(data))
        assert main(["run", str(cfg_path)]) == 2

    def test_seeded_outputs_identical(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path, noise_sigma=0.02)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["run", str(cfg_path), "--seed", "5", "--output-dir", str(out_a)]) == 0
        assert main(["run", str(cfg_path), "--seed", "5", "--output-dir", str(out_b)]) == 0
        assert (out_a / "trace.json").read_text() == (out_b / "trace.json").read_text()
        assert (out_a / "summary.csv").read_text() == (out_b / "summary.csv").read_text()

    def test_full_trace_flag(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        assert main(["run", str(cfg_path), "--full-trace", "--set", "scenario.horizon=5"]) == 0
        blob = json.loads((tmp_path / "out" / "trace.json").read_text())
        assert "series" in blob and len(blob["series"]["v"]) == 5


class TestOracleCommand:
    def test_single_bus_oracle_file(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        assert main(["oracle", str(cfg_path)]) == 0
        report = yaml.safe_load((tmp_path / "out" / "oracle.yaml").read_text())
        assert report["feasible"] is True
        assert report["q_star"][0] == pytest.approx(0.0025, abs=1e-9)
        assert report["kkt"]["total"] < 1e-8

    def test_infeasible_marked(self, tmp_path):
        cfg_path, _ = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        data["limits"]["v_low"] = 1.2
        data["limits"]["v_high"] = 1.3
        data["limits"]["q_high"] = 0.1
        cfg_path.write_text(yaml.safe_dump(data))
        assert main(["oracle", str(cfg_path)]) == 1
        report = yaml.safe_load((tmp_path / "out" / "oracle.yaml").read_text())
        assert report["feasible"] is False


class TestCertifyCommand:
    def test_certificate_file_written(self, tmp_path, capsys):
        cfg_path, _ = single_bus_config(tmp_path)
        assert main(["certify", str(cfg_path)]) == 0
        report = yaml.safe_load((tmp_path / "out" / "certificate.yaml").read_text())
        block = report["certificate"]
        assert block["alpha_max"] > 0
        # configured alpha=0.3 is far beyond the conservative bound
        assert block["alpha_within_bound"] is False
        assert "advisory" in block
        out = capsys.readouterr().out
        assert "advisory" in out

    def test_inside_bound_reported(self, tmp_path, capsys):
        cfg_path, _ = single_bus_config(tmp_path)
        data = yaml.safe_load(cfg_path.read_text())
        data["controller"]["alpha"] = 1e-4
        data["controller"]["beta"] = 1e-4
        data["controller"]["gamma"] = 1e-13
        cfg_path.write_text(yaml.safe_dump(data))
        assert main(["certify", str(cfg_path)]) == 0
        report = yaml.safe_load((tmp_path / "out" / "certificate.yaml").read_text())
        assert report["certificate"]["alpha_within_bound"] is True


class TestSweepValidate:
    def test_sweep_two_rows(self, tmp_path, capsys):
        a, _ = single_bus_config(tmp_path)
        sub = tmp_path / "second"
        sub.mkdir()
        b, _ = single_bus_config(sub)
        out_csv = tmp_path / "rows.csv"
        code = main(["sweep", str(a), str(b), "--output", str(out_csv)])
        assert code == 0
        rows = out_csv.read_text().strip().splitlines()
        assert len(rows) == 3
        assert "converged" in rows[0]
        assert all("True" in r for r in rows[1:])

    def test_sweep_empty_glob_usage_error(self, tmp_path):
        assert main(["sweep", str(tmp_path / "nothing*.yaml")]) == 2

    def test_sweep_partial_failure_nonzero(self, tmp_path):
        good, _ = single_bus_config(tmp_path)
        bad = tmp_path / "broken.yaml"
        bad.write_text("nonsense: true\n")
        assert main(["sweep", str(good), str(bad)]) == 1

    def test_validate_ok(self, tmp_path, capsys):
        cfg_path, _ = single_bus_config(tmp_path)
        assert main(["validate", str(tmp_path / "net.yaml")]) == 0
        assert "ok:" in capsys.readouterr().out

    def test_validate_rejects_non_tree(self, tmp_path, capsys):
        net = {
            "buses": 2,
            "v0": 1.0,
            "lines": [
                {"from": 0, "to": 1, "r": 0.1, "x": 0.1},
                {"from": 0, "to": 1, "r": 0.1, "x": 0.1},
            ],
        }
        path = tmp_path / "bad_net.yaml"
        path.write_text(yaml.safe_dump(net))
        assert main(["validate", str(path)]) == 2
        assert "cycle" in capsys.readouterr().out

    def test_usage_error_exit_2(self):
        assert main(["frobnicate"]) == 2
