import json

import pytest

from mrhydro.cli import main
from mrhydro.config import ConfigError, RunConfig, load_run_config


class TestRunConfig:
    def test_defaults_validate(self):
        cfg = RunConfig()
        cfg.validate()
        assert cfg.controller == "open_loop"
        assert cfg.plant_params().content_hash()

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="controler"):
            load_run_config(overrides={"controler": "lqgi"})

    def test_unknown_nested_keys_named(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig(plant={"friction": {"bogus": 1}}).validate()
        with pytest.raises(ConfigError, match="slope"):
            RunConfig(dither={"slope": 0.1}).validate()
        with pytest.raises(ConfigError, match="kq"):
            RunConfig(pid_master={"kq": 1.0}).validate()

    def test_unknown_controller_rejected(self):
        with pytest.raises(ConfigError, match="pid_elbow"):
            RunConfig(controller="pid_elbow").validate()

    def test_layering_file_then_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"controller": "pid_slave", "seed": 7,
                                    "weights": {"rho": 2e-4}}))
        cfg = load_run_config(str(path), overrides={"seed": 9,
                                                    "weights": {"rho_i": 500.0}})
        assert cfg.controller == "pid_slave"
        assert cfg.seed == 9
        # nested dicts merge key-wise
        assert cfg.weights == {"rho": 2e-4, "rho_i": 500.0}

    def test_hash_reflects_content(self):
        assert RunConfig().content_hash() == RunConfig().content_hash()
        assert RunConfig().content_hash() != RunConfig(seed=1).content_hash()

    def test_pid_overrides_merge_with_defaults(self):
        cfg = RunConfig(pid_master={"ki": 55.0})
        master, slave = cfg.pid_configs()
        assert master.ki == 55.0 and master.kd == 1.0e-3
        assert slave.ki == 19.0


class TestCliSynth:
    def test_writes_gains_and_certificates(self, tmp_path, capsys):
        rc = main(["synth", "--out-dir", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "Hurwitz" in out and "gain margins" in out
        assert (tmp_path / "gains.json").exists()
        assert (tmp_path / "config.json").exists()

    def test_cheap_control_trend_via_config(self, tmp_path, capsys):
        base = tmp_path / "base"
        expensive = tmp_path / "exp"
        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps({"weights": {"rho": 1e-2}}))
        assert main(["synth", "--out-dir", str(base)]) == 0
        norm_base = float(capsys.readouterr().out.split("|K| = ")[1].split(",")[0])
        assert main(["--config", str(cfgfile), "synth", "--out-dir", str(expensive)]) == 0
        norm_exp = float(capsys.readouterr().out.split("|K| = ")[1].split(",")[0])
        assert norm_exp < norm_base

    def test_corrupted_config_names_key(self, tmp_path, capsys):
        cfgfile = tmp_path / "bad.json"
        cfgfile.write_text(json.dumps({"scenari": {}}))
        rc = main(["--config", str(cfgfile), "synth", "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "scenari" in capsys.readouterr().err


class TestCliRun:
    def test_step_run_reproducible(self, tmp_path):
        args = ["run", "--kind", "step", "--controller", "open_loop",
                "--seed", "3", "--amplitude", "6.0"]
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out-dir", str(d1)]) == 0
        assert main(args + ["--out-dir", str(d2)]) == 0
        f1 = d1 / "trace_step_open_loop_seed3.csv"
        f2 = d2 / "trace_step_open_loop_seed3.csv"
        assert f1.read_bytes() == f2.read_bytes()

    def test_backdrive_flags(self, tmp_path):
        rc = main(["run", "--kind", "backdrive", "--controller", "open_loop",
                   "--freq", "1.0", "--cmd-torque", "0.0",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        path = tmp_path / "trace_backdrive_open_loop_seed0.csv"
        assert path.exists()
        meta = json.loads((str(path) + ".meta.json" and
                           (tmp_path / "trace_backdrive_open_loop_seed0.csv.meta.json")
                           ).read_text())
        assert meta["scenario"]["friction_mode"] == "stick_slip_sign"


class TestCliFrf:
    def test_two_point_sweep(self, tmp_path, capsys):
        rc = main(["frf", "--controller", "open_loop", "--freqs", "5", "10",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "frf_open_loop.csv").read_text().splitlines()
        assert lines[0].startswith("frequency [Hz]")
        assert len(lines) == 3
        assert "bandwidth" in capsys.readouterr().out


class TestCliReport:
    def test_single_row_subset(self, tmp_path, capsys):
        rc = main(["report", "--only", "open_loop", "--out-dir", str(tmp_path)])
        assert rc == 0
        text = (tmp_path / "comparison.txt").read_text()
        assert "Open-loop (baseline)" in text
        assert "row absent" in text  # other rows not measured
        csv = (tmp_path / "comparison.csv").read_text()
        assert csv.splitlines()[0] == "controller,metric,measured,reference"

    def test_unknown_subset_rejected(self, tmp_path):
        rc = main(["report", "--only", "nope", "--out-dir", str(tmp_path)])
        assert rc == 2
