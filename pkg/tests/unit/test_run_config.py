"""
tests/unit/test_run_config.py - Run Configuration Tests

Parsing, validation errors, serialization and the shipped config fixtures.
All pure functions, no mocks needed.
"""

import json
from pathlib import Path

import pytest

from app.core.errors import (
    BoundsMismatchError,
    DimensionLimitExceededError,
    MalformedJsonError,
    MissingSectionError,
    RangeViolationError,
    UnknownKeyError,
    UnknownParameterError,
)
from app.core.run_config import (
    Mode,
    SolverBackend,
    config_hash,
    parse_config,
    serialize_config,
    validate_against_seed,
)
from app.services.parameters import builtin_table

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


class TestParseValid:
    """A well-formed config parses into frozen models."""

    def test_base_config_parses(self, config_dict):
        """The shared fixture is a valid Cfd config."""
        config = parse_config(json.dumps(config_dict))
        assert config.mode == Mode.CFD
        assert config.solver_backend == SolverBackend.INTERNAL
        assert config.design.dimension == 7

    def test_kinematic_viscosity_derived(self, config_dict):
        """nu = mu / rho."""
        config = parse_config(json.dumps(config_dict))
        assert config.fluid.kinematic_viscosity == pytest.approx(1.789e-5 / 1027.0, rel=1e-12)

    def test_solver_defaults(self, config_dict):
        """An omitted solver section takes the documented defaults."""
        config = parse_config(json.dumps(config_dict))
        assert config.solver.max_steps == 20000
        assert config.solver.lattice_velocity == 0.05
        assert config.solver.clamp_reynolds is False

    def test_config_is_frozen(self, make_config):
        """Models cannot be mutated after parsing."""
        config = make_config()
        with pytest.raises(Exception):
            config.rng_seed = 5


class TestParseErrors:
    """Each rule violation surfaces as its own domain error."""

    def test_malformed_json(self):
        """Broken JSON → MalformedJsonError."""
        with pytest.raises(MalformedJsonError):
            parse_config("{not json")

    def test_unknown_key_reports_dotted_path(self, config_dict):
        """Unknown keys are rejected, never ignored."""
        config_dict["fluid"]["colour"] = "blue"
        with pytest.raises(UnknownKeyError) as info:
            parse_config(json.dumps(config_dict))
        assert info.value.paths == ["fluid.colour"]

    def test_missing_fluid_section(self, config_dict):
        """A required section that is absent → MissingSectionError."""
        del config_dict["fluid"]
        with pytest.raises(MissingSectionError) as info:
            parse_config(json.dumps(config_dict))
        assert info.value.section == "fluid"

    def test_negative_density(self, config_dict):
        """Physical quantities must be positive."""
        config_dict["fluid"]["density"] = -1.0
        with pytest.raises(RangeViolationError) as info:
            parse_config(json.dumps(config_dict))
        assert info.value.name == "fluid.density"

    def test_supersonic_inlet_rejected(self, config_dict):
        """inlet_speed must stay below the speed of sound."""
        config_dict["fluid"]["inlet_speed"] = 400.0
        with pytest.raises(RangeViolationError):
            parse_config(json.dumps(config_dict))

    def test_21_dimensions_rejected(self, config_dict):
        """The design space is capped at 20 dimensions."""
        config_dict["design"]["parameters"] = [{"name": f"p{i}", "min": 0.0, "max": 1.0} for i in range(21)]
        with pytest.raises(DimensionLimitExceededError) as info:
            parse_config(json.dumps(config_dict))
        assert info.value.dimension == 21

    def test_20_dimensions_accepted(self, config_dict):
        """Exactly 20 dimensions is fine."""
        config_dict["design"]["parameters"] = [{"name": f"p{i}", "min": 0.0, "max": 1.0} for i in range(20)]
        assert parse_config(json.dumps(config_dict)).design.dimension == 20

    def test_inverted_range(self, config_dict):
        """min must be below max."""
        config_dict["design"]["parameters"][0] = {"name": "cp1", "min": 5.0, "max": 5.0}
        with pytest.raises(RangeViolationError):
            parse_config(json.dumps(config_dict))

    def test_optimize_needs_optimizer(self, config_dict):
        """mode=Optimize without an optimizer section is incomplete."""
        config_dict["mode"] = "Optimize"
        with pytest.raises(MissingSectionError) as info:
            parse_config(json.dumps(config_dict))
        assert info.value.section == "optimizer"

    def test_sampling_outside_data_generation(self, config_dict):
        """A sampling section in a Cfd config is an unknown key."""
        config_dict["sampling"] = {"method": "UniformRandom", "count": 10, "batch_size": 5}
        with pytest.raises(UnknownKeyError):
            parse_config(json.dumps(config_dict))

    def test_initial_samples_below_budget(self, config_dict):
        """The initial design must leave room for model-driven proposals."""
        config_dict["mode"] = "Optimize"
        config_dict["optimizer"] = {"budget": 5, "initial_samples": 5}
        with pytest.raises(RangeViolationError):
            parse_config(json.dumps(config_dict))

    def test_external_backend_needs_command(self, config_dict):
        """ExternalCommand without solver.external_command is incomplete."""
        config_dict["solver_backend"] = "ExternalCommand"
        with pytest.raises(MissingSectionError):
            parse_config(json.dumps(config_dict))

    def test_external_stl_needs_path(self, config_dict):
        """seed_design=ExternalStl requires design.stl_path."""
        config_dict["design"] = {
            "seed_design": "ExternalStl",
            "parameters": [{"name": "body_length", "min": 100.0, "max": 200.0}],
        }
        with pytest.raises(MissingSectionError):
            parse_config(json.dumps(config_dict))


class TestSerialization:
    """serialize_config and config_hash."""

    def test_round_trip(self, make_config):
        """parse(serialize(c)) == c."""
        config = make_config(mode="Optimize", optimizer={"budget": 12, "initial_samples": 4, "kappa": 1.5})
        assert parse_config(serialize_config(config)) == config

    def test_hash_is_deterministic(self, make_config):
        """Equal configs hash equally."""
        assert config_hash(make_config()) == config_hash(make_config())

    def test_hash_changes_with_content(self, make_config):
        """Any change in the config changes the hash."""
        assert config_hash(make_config(rng_seed=1)) != config_hash(make_config(rng_seed=2))


class TestValidateAgainstSeed:
    """Design-space ranges must be a sub-box of the seed table."""

    def test_hull_space_fits(self, make_config):
        """The full hull table range is accepted."""
        validate_against_seed(make_config(), builtin_table("RevolvedHull"))

    def test_unknown_parameter(self, config_dict, make_config):
        """Names missing from the table are rejected."""
        design = dict(config_dict["design"], parameters=[{"name": "fin_area", "min": 0.0, "max": 1.0}])
        with pytest.raises(UnknownParameterError):
            validate_against_seed(make_config(design=design), builtin_table("RevolvedHull"))

    def test_range_beyond_table(self, config_dict, make_config):
        """A range wider than the table's bounds is rejected."""
        design = dict(config_dict["design"], parameters=[{"name": "cp1", "min": 0.0, "max": 300.0}])
        with pytest.raises(BoundsMismatchError):
            validate_against_seed(make_config(design=design), builtin_table("RevolvedHull"))


class TestShippedConfigs:
    """The case fixtures in configs/ parse and carry the documented conditions."""

    @pytest.mark.parametrize(
        "name, speed, density, intensity",
        [
            ("uuv_cfd.json", 1.00584, 1027.0, 0.04),
            ("land_vehicle_cfd.json", 31.2928, 1.225, 0.01),
            ("uav_cfd.json", 50.0, 1.225, 0.01),
        ],
    )
    def test_case_conditions(self, name, speed, density, intensity):
        """Speeds are stored in m/s (2.25 mph and 70 mph converted)."""
        config = parse_config((CONFIGS / name).read_text())
        assert config.fluid.inlet_speed == pytest.approx(speed)
        assert config.fluid.density == density
        assert config.fluid.dynamic_viscosity == 1.789e-5
        assert config.fluid.turbulence_intensity == intensity

    def test_uuv_speed_conversion(self):
        """2.25 miles/hour in m/s."""
        config = parse_config((CONFIGS / "uuv_cfd.json").read_text())
        assert config.fluid.inlet_speed == pytest.approx(2.25 * 1609.344 / 3600, rel=1e-9)

    @pytest.mark.parametrize("name", ["hull_optimize.json", "winged_datagen.json"])
    def test_experiment_configs_parse(self, name):
        """The optimization and data-generation fixtures are valid."""
        config = parse_config((CONFIGS / name).read_text())
        validate_against_seed(config, builtin_table(config.design.seed_design.value))
