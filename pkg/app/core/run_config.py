"""
app/core/run_config.py - Run Configuration Schema

The JSON run configuration selects the mode and parameterizes every
downstream stage. It is parsed into immutable pydantic models that are safe
to share read-only between worker processes.

Rules enforced at parse time:
- Unknown keys are rejected (with their dotted paths), never ignored
- Every physical quantity must be given explicitly; speeds are m/s only
- The optimizer section is present exactly when mode=Optimize, the sampling
  section exactly when mode=DataGeneration
- The design space has between 1 and 20 dimensions
- inlet_speed must stay below fluid.speed_of_sound (incompressible only)

Usage:
    from app.core.run_config import parse_config

    config = parse_config(Path("configs/uuv_cfd.json").read_text())
    config.fluid.kinematic_viscosity
"""

import hashlib
import json
from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import (
    BoundsMismatchError,
    ConfigError,
    DimensionLimitExceededError,
    MalformedJsonError,
    MissingSectionError,
    RangeViolationError,
    UnknownKeyError,
    UnknownParameterError,
)
from app.services.parameters import ParameterTable

# Largest design space the optimizer and samplers accept
MAX_DIMENSIONS = 20

_MODEL_CONFIG = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


# ============ Enums ============


class Mode(str, Enum):
    DATA_GENERATION = "DataGeneration"
    CFD = "Cfd"
    OPTIMIZE = "Optimize"


class SolverBackend(str, Enum):
    INTERNAL = "Internal"
    EXTERNAL_COMMAND = "ExternalCommand"


class SeedDesign(str, Enum):
    REVOLVED_HULL = "RevolvedHull"
    WINGED_BODY = "WingedBody"
    EXTERNAL_STL = "ExternalStl"


class SamplingMethod(str, Enum):
    UNIFORM_RANDOM = "UniformRandom"
    LHS_MAXIMIN = "LhsMaximin"
    LHS_MIN_CORR = "LhsMinCorr"


# ============ Sections ============


class FluidSpec(BaseModel):
    """Free-stream conditions. SI units throughout."""

    model_config = _MODEL_CONFIG

    inlet_speed: float = Field(gt=0)  # m/s
    density: float = Field(gt=0)  # kg/m^3
    dynamic_viscosity: float = Field(gt=0)  # N*s/m^2
    turbulence_intensity: float = Field(gt=0, lt=1)
    speed_of_sound: float = Field(default=340.0, gt=0)  # m/s

    @model_validator(mode="after")
    def _mach_guard(self) -> "FluidSpec":
        if self.inlet_speed >= self.speed_of_sound:
            raise RangeViolationError(
                "fluid.inlet_speed", self.inlet_speed, f"< speed_of_sound={self.speed_of_sound}"
            )
        nu = self.dynamic_viscosity / self.density
        if not (nu > 0 and nu < float("inf")):
            raise RangeViolationError("fluid.kinematic_viscosity", nu, "finite and > 0")
        return self

    @property
    def kinematic_viscosity(self) -> float:
        """nu = mu / rho (m^2/s)"""
        return self.dynamic_viscosity / self.density


class DomainScale(BaseModel):
    """Domain padding in multiples of the body's largest bounding-box extent."""

    model_config = _MODEL_CONFIG

    upstream: float = Field(gt=0)
    downstream: float = Field(gt=0)
    lateral: float = Field(gt=0)


class QualitySpec(BaseModel):
    model_config = _MODEL_CONFIG

    max_aspect_ratio: float = Field(default=100.0, gt=1)
    max_non_orthogonality: float = Field(default=65.0, gt=0, lt=90)  # degrees
    max_skewness: float = Field(default=4.0, gt=0)


class MeshSpec(BaseModel):
    model_config = _MODEL_CONFIG

    domain_scale: DomainScale
    base_cells: tuple[int, int, int]
    surface_refinement_levels: int = Field(ge=0, le=8)
    max_retries: int = Field(ge=1)
    quality: QualitySpec = QualitySpec()
    # Threads used for castellation cell classification
    workers: int = Field(default=1, ge=1)
    # Octree level whose cell size becomes the lattice spacing of the internal solver
    lattice_level: int = Field(default=0, ge=0)

    @field_validator("base_cells")
    @classmethod
    def _positive_counts(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        for axis, count in zip("xyz", value):
            if count < 1:
                raise RangeViolationError(f"mesh.base_cells.{axis}", count, ">= 1")
        return value


class DesignParameter(BaseModel):
    model_config = _MODEL_CONFIG

    name: str = Field(min_length=1)
    min: float  # mm
    max: float  # mm


class DesignSpaceSpec(BaseModel):
    model_config = _MODEL_CONFIG

    parameters: tuple[DesignParameter, ...]
    seed_design: SeedDesign
    # Only for seed_design=ExternalStl
    stl_path: str | None = None

    @field_validator("parameters")
    @classmethod
    def _check_parameters(cls, value: tuple[DesignParameter, ...]) -> tuple[DesignParameter, ...]:
        if not (1 <= len(value) <= MAX_DIMENSIONS):
            raise DimensionLimitExceededError(len(value), MAX_DIMENSIONS)

        seen: set[str] = set()
        for i, param in enumerate(value):
            if param.name in seen:
                raise ConfigError(f"design.parameters[{i}]: duplicate name '{param.name}'")
            seen.add(param.name)
            if not param.min < param.max:
                raise RangeViolationError(f"design.parameters[{i}].max", param.max, f"> min={param.min}")
        return value

    @model_validator(mode="after")
    def _check_stl_path(self) -> "DesignSpaceSpec":
        if self.seed_design == SeedDesign.EXTERNAL_STL and not self.stl_path:
            raise MissingSectionError("design.stl_path", "required for seed_design=ExternalStl")
        return self

    @property
    def dimension(self) -> int:
        return len(self.parameters)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parameters]


class BoSpec(BaseModel):
    model_config = _MODEL_CONFIG

    budget: int = Field(ge=1)
    initial_samples: int = Field(ge=1)
    kappa: float = Field(default=2.0, ge=0)
    noise_variance: float = Field(default=1e-6, ge=0, le=1)
    acquisition: Literal["LCB"] = "LCB"
    isotropic: bool = False
    restarts: int = Field(default=8, ge=1)
    candidates: int = Field(default=2048, ge=16)
    lhs_iters: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _check_budget(self) -> "BoSpec":
        if self.initial_samples >= self.budget:
            raise RangeViolationError(
                "optimizer.initial_samples", self.initial_samples, f"< budget={self.budget}"
            )
        return self


class SamplingSpec(BaseModel):
    model_config = _MODEL_CONFIG

    method: SamplingMethod
    count: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    iters: int = Field(default=1000, ge=1)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_batch(self) -> "SamplingSpec":
        if self.batch_size > self.count:
            raise RangeViolationError("sampling.batch_size", self.batch_size, f"<= count={self.count}")
        return self


class SolverSpec(BaseModel):
    """Knobs of the internal lattice solver and the external adapter."""

    model_config = _MODEL_CONFIG

    max_steps: int = Field(default=20000, ge=1)
    residual_tol: float = Field(default=1e-4, gt=0)
    check_interval: int = Field(default=100, ge=1)
    # Lattice Mach number u/c_s stays <= 0.1
    lattice_velocity: float = Field(default=0.05, gt=0, le=0.0577)
    clamp_reynolds: bool = False
    turbulence_length_fraction: float = Field(default=0.07, gt=0)
    c_mu: float = Field(default=0.09, gt=0)
    external_command: tuple[str, ...] | None = None
    # Unset falls back to ANVIL_EXTERNAL_TIMEOUT_S
    timeout_s: float | None = Field(default=None, gt=0)


class RunConfig(BaseModel):
    model_config = _MODEL_CONFIG

    mode: Mode
    fluid: FluidSpec
    mesh: MeshSpec
    design: DesignSpaceSpec
    optimizer: BoSpec | None = None
    sampling: SamplingSpec | None = None
    solver_backend: SolverBackend
    solver: SolverSpec = SolverSpec()
    output_dir: str = Field(min_length=1)
    rng_seed: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_sections(self) -> "RunConfig":
        # 1. Mode-conditional sections
        wanted = {
            "optimizer": self.mode == Mode.OPTIMIZE,
            "sampling": self.mode == Mode.DATA_GENERATION,
        }
        for section, required in wanted.items():
            present = getattr(self, section) is not None
            if required and not present:
                raise MissingSectionError(section, f"required for mode={self.mode.value}")
            if present and not required:
                raise UnknownKeyError([section])

        # 2. External backend needs a command
        if self.solver_backend == SolverBackend.EXTERNAL_COMMAND and not self.solver.external_command:
            raise MissingSectionError("solver.external_command", "required for solver_backend=ExternalCommand")
        return self


# ============ Parse / Serialize ============

_BOUND_ERRORS = {
    "greater_than": ("gt", ">"),
    "greater_than_equal": ("ge", ">="),
    "less_than": ("lt", "<"),
    "less_than_equal": ("le", "<="),
}


def _dotted(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc)


def _translate(exc: ValidationError) -> ConfigError:
    """Map a pydantic ValidationError onto the domain error for its first cause."""
    errors = exc.errors()

    unknown = [_dotted(e["loc"]) for e in errors if e["type"] == "extra_forbidden"]
    if unknown:
        return UnknownKeyError(unknown)

    for e in errors:
        if e["type"] == "missing":
            return MissingSectionError(_dotted(e["loc"]))

    for e in errors:
        if e["type"] in _BOUND_ERRORS:
            key, op = _BOUND_ERRORS[e["type"]]
            return RangeViolationError(_dotted(e["loc"]), e["input"], f"{op} {e['ctx'][key]}")

    first = errors[0]
    return ConfigError(f"{_dotted(first['loc'])}: {first['msg']}")


def parse_config(text: str) -> RunConfig:
    """
    Parse and validate a JSON run configuration.

    Args:
        text: The JSON document

    Returns:
        A frozen RunConfig

    Raises:
        MalformedJsonError: If text is not valid JSON
        MissingSectionError: If a required or mode-conditional section is absent
        UnknownKeyError: If any key is not part of the schema
        RangeViolationError: If a value violates a stated bound
        DimensionLimitExceededError: If the design space has more than 20 dimensions
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedJsonError(f"line {e.lineno} column {e.colno}: {e.msg}") from e

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _translate(e) from e


def serialize_config(config: RunConfig) -> str:
    """Inverse of parse_config: parse_config(serialize_config(c)) == c."""
    return config.model_dump_json(exclude_none=True, indent=2)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical (sorted-key, compact) serialization."""
    canonical = json.dumps(
        config.model_dump(mode="json", exclude_none=True), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_against_seed(config: RunConfig, table: ParameterTable) -> None:
    """
    Check that the design space is a sub-box of the seed design's table.

    Raises:
        UnknownParameterError: If a design parameter is not in the table
        BoundsMismatchError: If a design range exceeds the table's [min, max]
    """
    known = {entry.name: entry for entry in table.entries}
    for param in config.design.parameters:
        if param.name not in known:
            raise UnknownParameterError(param.name)
        entry = known[param.name]
        if param.min < entry.min or param.max > entry.max:
            raise BoundsMismatchError(param.name, (param.min, param.max), (entry.min, entry.max))
