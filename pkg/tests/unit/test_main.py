"""
tests/unit/test_main.py - CLI Tests

Argument handling, mode checks and exit codes. The mode runners are mocked
except where the failure happens before any meshing.
"""

import json
from unittest.mock import patch

import pytest

from app.core.errors import AllEvaluationsFailedError, AutoMeshExhaustedError, ConfigError
from app.main import EXIT_EVALUATION_FAILED, EXIT_FATAL, EXIT_OK, main, parse_assignments
from app.services.bo import BoHistory
from app.services.flow import DragReport
from app.services.storage import load_manifest

REPORT = DragReport(
    drag_force=1.25, lateral_force=(0.0, 0.0), reference_area=0.03, drag_coefficient=0.08,
    iterations=100, reynolds=5.7e4, converged=True,
)


@pytest.fixture
def config_file(tmp_path, config_dict):
    """Write a config dict to disk; returns a factory taking section overrides."""

    def _write(**sections):
        data = {**config_dict, **sections}
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data))
        return str(path)

    return _write


class TestParseAssignments:
    """--param NAME=VALUE."""

    def test_values(self):
        """Names map to floats."""
        assert parse_assignments(["cp1=120", "nose_length=450.5"]) == {"cp1": 120.0, "nose_length": 450.5}

    @pytest.mark.parametrize("item", ["cp1", "=3", "cp1=abc"])
    def test_malformed(self, item):
        """Anything but NAME=number is a config error."""
        with pytest.raises(ConfigError):
            parse_assignments([item])


class TestExitCodes:
    """main() return values."""

    def test_cfd_success(self, tmp_path, config_file):
        """A finished run exits 0; --param values reach the runner."""
        with patch("app.main.run_cfd", return_value=REPORT) as run:
            code = main(["cfd", "--config", config_file(), "--out", str(tmp_path / "out"), "--param", "cp1=120"])
        assert code == EXIT_OK
        assert run.call_args.kwargs["params"] == {"cp1": 120.0}

    def test_mode_mismatch(self, config_file):
        """The subcommand must match the configured mode."""
        with patch("app.main.run_optimize") as run:
            assert main(["optimize", "--config", config_file()]) == EXIT_FATAL
        run.assert_not_called()

    def test_missing_config(self, tmp_path):
        """An unreadable config file is fatal."""
        assert main(["cfd", "--config", str(tmp_path / "nope.json")]) == EXIT_FATAL

    def test_invalid_config(self, config_file):
        """Config validation errors are fatal."""
        assert main(["cfd", "--config", config_file(rng_seed=-1)]) == EXIT_FATAL

    def test_missing_stl_before_meshing(self, tmp_path, config_file):
        """--stl pointing nowhere fails with exit 1 and a manifest naming the IO failure."""
        out = tmp_path / "out"
        with patch("app.services.pipeline.auto_mesh") as mesh:
            code = main(["cfd", "--config", config_file(), "--out", str(out), "--stl", str(tmp_path / "none.stl")])
        assert code == EXIT_FATAL
        mesh.assert_not_called()
        assert load_manifest(out).status == "io_failure"

    def test_auto_mesh_exhausted(self, config_file):
        """Giving up on meshing exits 2."""
        with patch("app.main.run_cfd", side_effect=AutoMeshExhaustedError([])):
            assert main(["cfd", "--config", config_file()]) == EXIT_EVALUATION_FAILED

    def test_all_evaluations_failed(self, config_file):
        """An optimization without a single success exits 2."""
        optimizer = {"budget": 4, "initial_samples": 2}
        with patch("app.main.run_optimize", side_effect=AllEvaluationsFailedError(BoHistory(names=["cp1"]))):
            assert main(["optimize", "--config", config_file(mode="Optimize", optimizer=optimizer)]) == (
                EXIT_EVALUATION_FAILED
            )

    def test_version(self, capsys):
        """--version prints and exits cleanly."""
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "anvil" in capsys.readouterr().out
