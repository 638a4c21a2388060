"""Tests for experiment configuration layering and validation."""

from pathlib import Path
from unittest.mock import patch

import pytest

from lorentz_lab.billiard import Scaling
from lorentz_lab.config import ExperimentConfig, Mode, load_config, read_config_file
from lorentz_lab.errors import ConfigurationError
from lorentz_lab.limit_chain import BackendVariant


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "lab.conf"
    path.write_text(text)
    return path


class TestDefaults:
    def test_mode_only(self) -> None:
        cfg = load_config("limit", environ={})
        assert cfg.mode is Mode.LIMIT
        assert cfg.d == 2
        assert cfg.gamma == 0.5
        assert cfg.n_grid == (100, 1000)
        assert cfg.backend is BackendVariant.SURROGATE_IID
        assert cfg.scaling is Scaling.BOLTZMANN_GRAD

    def test_missing_mode(self) -> None:
        with pytest.raises(ConfigurationError) as excinfo:
            load_config(environ={})
        assert excinfo.value.diagnostics == {"mode": "missing"}

    def test_experiment_dict_drops_execution_fields(self) -> None:
        cfg = ExperimentConfig(mode=Mode.RATES, workers=4, output_dir=Path("/tmp/x"))
        payload = cfg.experiment_dict()
        assert "workers" not in payload and "output_dir" not in payload
        assert payload["mode"] == "rates"
        assert payload["n_grid"] == [100, 1000]
        assert cfg.to_dict()["output_dir"] == "/tmp/x"


class TestConfigFile:
    def test_parses_values(self, tmp_path: Path) -> None:
        path = _write(
            tmp_path,
            "schema_version = 1\n"
            "# comment line\n"
            "mode = distances\n"
            "d = 3   # trailing comment\n"
            "n_grid = 100, 1_000, 10000\n"
            "t_grid = 50.5,100\n"
            "backend = empirical\n"
            "r = 0.001\n"
            "replicas = 1_000\n",
        )
        cfg = load_config(config_file=path, environ={})
        assert cfg.mode is Mode.DISTANCES
        assert cfg.d == 3
        assert cfg.n_grid == (100, 1000, 10000)
        assert cfg.t_grid == (50.5, 100.0)
        assert cfg.backend is BackendVariant.EMPIRICAL
        assert cfg.replicas == 1000

    def test_requires_schema_version(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as excinfo:
            read_config_file(_write(tmp_path, "mode = limit\n"))
        assert "schema_version" in excinfo.value.diagnostics

    def test_rejects_unknown_version(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as excinfo:
            read_config_file(_write(tmp_path, "schema_version = 2\n"))
        assert "unsupported" in excinfo.value.diagnostics["schema_version"]

    def test_reports_malformed_line(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigurationError) as excinfo:
            read_config_file(_write(tmp_path, "schema_version = 1\nnot a pair\n"))
        assert "line 2" in excinfo.value.diagnostics


class TestLayering:
    def test_overrides_beat_file(self, tmp_path: Path) -> None:
        path = _write(tmp_path, "schema_version = 1\nmode = limit\nd = 3\n")
        cfg = load_config(config_file=path, overrides={"d": "4", "seed": None}, environ={})
        assert cfg.d == 4
        assert cfg.seed == 0

    def test_mode_argument_beats_file(self, tmp_path: Path) -> None:
        path = _write(tmp_path, "schema_version = 1\nmode = limit\n")
        assert load_config("rates", path, environ={}).mode is Mode.RATES

    def test_environment(self, tmp_path: Path) -> None:
        env = {"LORENTZ_LAB_OUTPUT_ROOT": str(tmp_path), "LORENTZ_LAB_WORKERS": "3"}
        with patch.dict("os.environ", env):
            cfg = load_config("limit")
        assert cfg.output_dir == tmp_path
        assert cfg.workers == 3

    def test_flag_beats_environment(self) -> None:
        cfg = load_config("limit", overrides={"workers": "2"}, environ={"LORENTZ_LAB_WORKERS": "8"})
        assert cfg.workers == 2

    def test_typed_overrides(self) -> None:
        cfg = load_config(Mode.BILLIARD, overrides={"n_grid": [10, 20], "d": 3}, environ={})
        assert cfg.n_grid == (10, 20)
        assert cfg.d == 3


class TestValidation:
    def _diagnostics(self, **overrides: str) -> dict[str, str]:
        with pytest.raises(ConfigurationError) as excinfo:
            load_config("limit", overrides=overrides, environ={})
        return excinfo.value.diagnostics

    def test_collects_every_problem(self) -> None:
        diagnostics = self._diagnostics(d="1", gamma="1.5", replicas="0", mixing_lags="2")
        assert set(diagnostics) == {"d", "gamma", "replicas", "mixing_lags"}

    def test_parse_failures(self) -> None:
        diagnostics = self._diagnostics(d="two", backend="markov", colour="red")
        assert diagnostics["d"].startswith("cannot parse")
        assert diagnostics["backend"].startswith("cannot parse")
        assert diagnostics["colour"] == "unknown field"

    @pytest.mark.parametrize("grid", ["1000,100", "100,100", "1,10"])
    def test_n_grid(self, grid: str) -> None:
        assert "n_grid" in self._diagnostics(n_grid=grid)

    def test_t_grid(self) -> None:
        assert "t_grid" in self._diagnostics(t_grid="1.0,10")
        assert "t_grid" in self._diagnostics(t_grid="100,10")

    def test_seed_range(self) -> None:
        assert "seed" in self._diagnostics(seed=str(1 << 64))
        assert load_config("limit", overrides={"seed": str((1 << 64) - 1)}, environ={}).seed

    def test_overlapping_scatterers(self) -> None:
        with pytest.raises(ConfigurationError) as excinfo:
            load_config("billiard", overrides={"r": "0.6", "scaling": "raw"}, environ={})
        assert "overlap" in excinfo.value.diagnostics["r"]

    def test_overlap_ignored_for_surrogate_limit(self) -> None:
        assert load_config("limit", overrides={"r": "0.6", "scaling": "raw"}, environ={}).r == 0.6
