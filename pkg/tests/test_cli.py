import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy.integrate import trapezoid

from kunzel_uq.cli import EXIT_CODES, main, read_observations, sha256_file
from kunzel_uq.config import ConfigError, load_config, parse_config
from kunzel_uq.fem.io import read_states_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def tiny_raw():
    raw = yaml.safe_load((CONFIGS / "reduced.yaml").read_text())
    raw["random_field"]["modes"] = 2
    raw["surrogate"].update(degree=1, study_modes=[1, 2], study_degrees=[1], error_samples=4)
    raw["mcmc"].update(samples=200, warmup=50, prior_samples=10, density_points=120)
    return raw


def write_config(path, raw):
    path.write_text(yaml.safe_dump(raw))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root / "tiny.yaml", tiny_raw())
    out = root / "run"
    codes = {}
    for cmd in (["simulate"], ["build-surrogate"], ["virtual-experiment"],
                ["update", "--forward", "pce"], ["update", "--forward", "fe"]):
        codes[" ".join(cmd)] = main(cmd + ["--config", cfg, "--out", str(out)])
    codes["report"] = main(["report", "--out", str(out)])
    return root, cfg, out, codes


class TestConfig:
    def test_shipped_configs_parse(self):
        full = load_config(CONFIGS / "default.yaml")
        assert (full.mesh.nx * full.mesh.ny, full.time.steps, full.random_field.modes) == (80, 151, 7)
        assert full.time_integration().dt == pytest.approx(9600.0)
        reduced = load_config(CONFIGS / "reduced.yaml")
        assert reduced.time_integration().dt == pytest.approx(48000.0)

    @pytest.mark.parametrize("section,key", [("mesh", "nx"), ("time", "steps"), ("seeds", "mcmc"),
                                             ("prior", "dwf"), ("observations", "sigma_phi")])
    def test_missing_key_is_named(self, section, key):
        raw = tiny_raw()
        del raw[section][key]
        with pytest.raises(ConfigError, match=f"{section}.{key}"):
            parse_config(raw)

    def test_missing_section_and_unknown_key(self):
        raw = tiny_raw()
        del raw["mcmc"]
        with pytest.raises(ConfigError, match="mcmc"):
            parse_config(raw)
        raw = tiny_raw()
        raw["mesh"]["nz"] = 3
        with pytest.raises(ConfigError, match="mesh.nz"):
            parse_config(raw)

    @pytest.mark.parametrize("section,key,value", [
        ("boundary", "phi_ext", 1.2), ("mesh", "nx", 1), ("random_field", "modes", 1000),
        ("time", "gamma", 1.5), ("observations", "sigma_theta", 0.0), ("mcmc", "burn_in", 1.0),
        ("observations", "probes", [0, 999]), ("prior", "mu", [-1.0, 1.0]),
    ])
    def test_invalid_value_is_named(self, section, key, value):
        raw = tiny_raw()
        raw[section][key] = value
        with pytest.raises(ConfigError, match=f"{section}.{key}"):
            parse_config(raw)

    def test_seed_override(self):
        cfg = parse_config(tiny_raw()).with_seed(100)
        assert (cfg.seeds.truth, cfg.seeds.noise, cfg.seeds.mcmc, cfg.seeds.error_samples) == (100, 101, 102, 103)


class TestCommands:
    def test_missing_key_exit_code(self, tmp_path, capsys):
        raw = tiny_raw()
        del raw["boundary"]["theta_ext"]
        code = main(["simulate", "--config", write_config(tmp_path / "bad.yaml", raw), "--out", str(tmp_path)])
        assert code == EXIT_CODES["config"]
        assert "boundary.theta_ext" in capsys.readouterr().err

    def test_default_simulation_shape(self, tmp_path):
        assert main(["simulate", "--config", str(CONFIGS / "default.yaml"), "--out", str(tmp_path)]) == 0
        sol = read_states_csv(tmp_path / "simulate" / "states.csv")
        assert sol.states.shape == (151, 160)
        with open(tmp_path / "simulate" / "states.csv") as fh:
            assert next(csv.reader(fh)) == ["step", "time_s", "node", "theta_C", "phi"]

    def test_equilibrium_config_is_constant(self, tmp_path):
        raw = tiny_raw()
        raw["boundary"].update(theta_ext=20.0, theta_int=20.0, theta_in=20.0, phi_ext=0.6, phi_int=0.6, phi_in=0.6)
        assert main(["simulate", "--config", write_config(tmp_path / "eq.yaml", raw), "--out", str(tmp_path)]) == 0
        states = read_states_csv(tmp_path / "simulate" / "states.csv").states
        assert np.max(np.abs(states - states[0])) < 1e-10

    def test_simulate_at_given_xi(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", tiny_raw())
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--xi", "1.5,-0.5"]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = read_states_csv(tmp_path / "a" / "simulate" / "states.csv").states
        b = read_states_csv(tmp_path / "b" / "simulate" / "states.csv").states
        assert np.max(np.abs(a - b)) > 1e-3

    def test_pipeline_exit_codes(self, pipeline):
        *_, codes = pipeline
        assert all(code == 0 for code in codes.values()), codes

    def test_error_report_columns(self, pipeline):
        _, _, out, _ = pipeline
        with open(out / "surrogate" / "error_report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {"PCE-only", "PCE+KLE"} <= set(rows[0])
        assert len(rows) == 2
        assert all(float(r["PCE-only"]) > 0 and float(r["PCE+KLE"]) > 0 for r in rows)
        with open(out / "surrogate" / "error_report_wallclock.csv") as fh:
            assert "build_seconds" in next(csv.reader(fh))

    def test_rebuild_gives_identical_hash(self, pipeline, tmp_path):
        _, cfg, out, _ = pipeline
        assert main(["build-surrogate", "--config", cfg, "--out", str(tmp_path)]) == 0
        for name in ("surrogate.zip", "error_report.csv", "kle.json", "manifest.json"):
            assert sha256_file(tmp_path / "surrogate" / name) == sha256_file(out / "surrogate" / name)

    def test_observation_file(self, pipeline):
        _, _, out, _ = pipeline
        obs = read_observations(out / "experiment" / "observations.json")
        assert obs.size == 2 * 14 * 3
        assert obs.truth_xi.shape == (2,)
        with open(out / "experiment" / "truth_fields.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 28

    def test_default_experiment_has_84_values(self, tmp_path):
        assert main(["virtual-experiment", "--config", str(CONFIGS / "default.yaml"), "--out", str(tmp_path)]) == 0
        body = json.loads((tmp_path / "experiment" / "observations.json").read_text())
        assert len(body["values"]) == 84
        assert np.asarray(body["covariance"]).shape == (84, 84)

    def test_experiment_reproducible_and_seed_override(self, pipeline, tmp_path):
        _, cfg, out, _ = pipeline
        assert main(["virtual-experiment", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert sha256_file(tmp_path / "a" / "experiment" / "observations.json") == \
            sha256_file(out / "experiment" / "observations.json")
        assert main(["virtual-experiment", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
        a = read_observations(tmp_path / "a" / "experiment" / "observations.json")
        b = read_observations(tmp_path / "b" / "experiment" / "observations.json")
        assert not np.allclose(a.truth_xi, b.truth_xi)

    def test_update_is_byte_reproducible(self, pipeline, tmp_path):
        _, cfg, out, _ = pipeline
        for stage in ("experiment", "surrogate"):
            dst = tmp_path / stage
            dst.mkdir()
            for f in (out / stage).iterdir():
                (dst / f.name).write_bytes(f.read_bytes())
        assert main(["update", "--forward", "pce", "--config", cfg, "--out", str(tmp_path)]) == 0
        for name in ("chain.csv", "densities.csv", "pairwise.csv", "response_variance.csv", "manifest.json"):
            assert sha256_file(tmp_path / "update_pce" / name) == sha256_file(out / "update_pce" / name)

    def test_densities_integrate_to_one(self, pipeline):
        _, _, out, _ = pipeline
        tables = {}
        with open(out / "update_pce" / "densities.csv") as fh:
            for row in csv.DictReader(fh):
                tables.setdefault(row["quantity"], []).append((float(row["value"]), float(row["density"])))
        assert any(k.startswith("xi_") for k in tables)
        assert any(k.startswith("dwf@") for k in tables)
        assert any(k.startswith("theta@") for k in tables)
        for name, pts in tables.items():
            x, d = np.array(pts).T
            assert abs(trapezoid(d, x) - 1.0) < 1e-2, name

    def test_timing_ratio_reported(self, pipeline):
        _, _, out, _ = pipeline
        fe = json.loads((out / "update_fe" / "timing.json").read_text())
        pce = json.loads((out / "update_pce" / "timing.json").read_text())
        assert pce["fe_over_pce"] > 1
        assert pce["seconds_per_sample"] < fe["seconds_per_sample"]

    def test_update_without_surrogate_fails(self, pipeline, tmp_path, capsys):
        _, cfg, out, _ = pipeline
        (tmp_path / "experiment").mkdir()
        src = out / "experiment" / "observations.json"
        (tmp_path / "experiment" / "observations.json").write_bytes(src.read_bytes())
        assert main(["update", "--forward", "pce", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CODES["update"]
        assert "error [update]" in capsys.readouterr().err

    def test_report_full_pipeline(self, pipeline):
        _, _, out, _ = pipeline
        report = json.loads((out / "report" / "report.json").read_text())
        assert report["missing_stages"] == []
        for stage, entry in report["stages"].items():
            assert entry["present"] and entry["artifacts"] and not entry["modified_artifacts"], stage
        assert report["chain_speedup"] > 1

    def test_report_empty_and_partial(self, pipeline, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path)]) == EXIT_CODES["report"]
        assert "error [report]" in capsys.readouterr().err
        _, cfg, _, _ = pipeline
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert main(["report", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert report["stages"]["simulate"]["present"]
        assert set(report["missing_stages"]) == {"surrogate", "experiment", "update_pce", "update_fe"}
