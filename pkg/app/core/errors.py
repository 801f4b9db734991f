"""
app/core/errors.py - Error Hierarchy

Every failure the pipeline can report is an AnvilError subclass with a stable
`code`. Codes are what dataset rows, mesh attempt logs and the run manifest
record, so they must never change once published.

None of these classes derive from ValueError: pydantic only wraps ValueError
and AssertionError raised inside validators, so domain errors raised there
reach the caller unchanged.
"""

from typing import Any


class AnvilError(Exception):
    """Base class for every domain error."""

    code = "anvil_error"


# ============ Configuration ============


class ConfigError(AnvilError):
    code = "config_error"


class MalformedJsonError(ConfigError):
    code = "malformed_json"


class MissingSectionError(ConfigError):
    code = "missing_section"

    def __init__(self, section: str, reason: str = "") -> None:
        self.section = section
        super().__init__(f"missing section '{section}'" + (f": {reason}" if reason else ""))


class UnknownKeyError(ConfigError):
    code = "unknown_key"

    def __init__(self, paths: list[str]) -> None:
        self.paths = paths
        super().__init__(f"unknown keys: {', '.join(paths)}")


class RangeViolationError(ConfigError):
    code = "range_violation"

    def __init__(self, name: str, value: Any, bound: str) -> None:
        self.name = name
        self.value = value
        self.bound = bound
        super().__init__(f"{name}={value!r} violates bound {bound}")


class DimensionLimitExceededError(ConfigError):
    code = "dimension_limit_exceeded"

    def __init__(self, dimension: int, limit: int = 20) -> None:
        self.dimension = dimension
        self.limit = limit
        super().__init__(f"design space has {dimension} dimensions; supported range is 1..{limit}")


class UnknownParameterError(ConfigError):
    code = "unknown_parameter"

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown parameter '{name}'")


class BoundsMismatchError(ConfigError):
    code = "bounds_mismatch"

    def __init__(self, name: str, requested: tuple[float, float], allowed: tuple[float, float]) -> None:
        self.name = name
        super().__init__(f"parameter '{name}' range {requested} exceeds seed bounds {allowed}")


class OutOfBoundsError(ConfigError):
    code = "out_of_bounds"

    def __init__(self, name: str, value: float, low: float, high: float) -> None:
        self.name = name
        self.value = value
        super().__init__(f"parameter '{name}'={value} outside [{low}, {high}]")


# ============ Geometry and STL ============


class GeometryError(AnvilError):
    code = "geometry_error"


class DegenerateProfileError(GeometryError):
    code = "degenerate_profile"


class ResolutionTooLowError(GeometryError):
    code = "resolution_too_low"


class SelfIntersectionError(GeometryError):
    code = "self_intersection"


class NonPositiveParamError(GeometryError):
    code = "non_positive_param"


class StlError(AnvilError):
    code = "stl_error"


class TruncatedFileError(StlError):
    code = "truncated_file"


class FacetCountMismatchError(StlError):
    code = "facet_count_mismatch"

    def __init__(self, declared: int, actual: int) -> None:
        self.declared = declared
        self.actual = actual
        super().__init__(f"header declares {declared} facets, payload holds {actual}")


class UnparsableAsciiError(StlError):
    code = "unparsable_ascii"

    def __init__(self, line: int, text: str) -> None:
        self.line = line
        super().__init__(f"line {line}: cannot parse {text!r}")


# ============ Meshing ============


class MeshError(AnvilError):
    code = "mesh_error"


class NonWatertightInputError(MeshError):
    code = "non_watertight_input"


class MeshFailure(MeshError):
    """A meshing stage rejected the body; auto_mesh retries on this."""

    code = "mesh_failure"

    def __init__(self, stage: str, diagnostic: str, counts: dict[str, int] | None = None) -> None:
        self.stage = stage
        self.diagnostic = diagnostic
        self.counts = counts or {}
        super().__init__(f"{stage}: {diagnostic} {self.counts}")


class AutoMeshExhaustedError(MeshError):
    code = "auto_mesh_exhausted"

    def __init__(self, attempts: list) -> None:
        self.attempts = attempts
        super().__init__(f"auto-meshing failed after {len(attempts)} attempts")


# ============ Flow solvers ============


class SolverError(AnvilError):
    code = "solver_error"


class LatticeStabilityError(SolverError):
    code = "lattice_unstable"


class DivergedError(SolverError):
    code = "diverged"


class NotConvergedError(SolverError):
    code = "not_converged"

    def __init__(self, max_steps: int, field: Any = None) -> None:
        self.max_steps = max_steps
        self.field = field
        super().__init__(f"no convergence within {max_steps} steps")


class MissingPatchError(SolverError):
    code = "missing_patch"

    def __init__(self, kind: str) -> None:
        self.kind = kind
        super().__init__(f"mesh has no '{kind}' patch")


class CommandFailedError(SolverError):
    code = "command_failed"

    def __init__(self, exit_code: int, log: str) -> None:
        self.exit_code = exit_code
        self.log = log
        super().__init__(f"external command exited with {exit_code}")


class ResultMissingError(SolverError):
    code = "result_missing"


class ForcesParseError(SolverError):
    code = "parse_error"

    def __init__(self, line: int, text: str) -> None:
        self.line = line
        super().__init__(f"forces.csv line {line}: {text!r}")


class ExternalTimeoutError(SolverError):
    code = "timeout"


class IoFailureError(AnvilError):
    code = "io_failure"


# ============ Sampling and optimization ============


class DimensionMismatchError(AnvilError):
    code = "dimension_mismatch"


class SingularKernelError(AnvilError):
    code = "singular_kernel"


class NonFiniteObjectiveError(AnvilError):
    code = "non_finite_objective"


class AllEvaluationsFailedError(AnvilError):
    code = "all_evaluations_failed"

    def __init__(self, history: Any, message: str = "no design evaluation succeeded") -> None:
        self.history = history
        super().__init__(message)
