"""
app/services/flow.py - Flow Conditions, Fields and Drag

Shared types and post-processing for both flow backends (the internal
lattice solver in lattice.py and the external adapter in external.py):

- FlowConditions / TurbulenceIc: free stream and k-omega initial values
- FlowField: a converged field on the solver grid, in SI units
- DragReport: drag force, reference area and coefficient
- VTK legacy export and re-import of fields
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import IoFailureError, SolverError
from app.core.run_config import FluidSpec
from app.services.surface import TriMesh


class FlowConditions(BaseModel):
    """Free-stream conditions (SI)."""

    model_config = ConfigDict(frozen=True)

    inlet_speed: float = Field(gt=0)  # m/s
    density: float = Field(gt=0)  # kg/m^3
    kinematic_viscosity: float = Field(gt=0)  # m^2/s
    turbulence_intensity: float = Field(gt=0, lt=1)

    @classmethod
    def from_fluid(cls, fluid: FluidSpec) -> "FlowConditions":
        return cls(
            inlet_speed=fluid.inlet_speed,
            density=fluid.density,
            kinematic_viscosity=fluid.kinematic_viscosity,
            turbulence_intensity=fluid.turbulence_intensity,
        )

    def reynolds(self, length_m: float) -> float:
        """Re = U * L / nu"""
        return self.inlet_speed * length_m / self.kinematic_viscosity


class TurbulenceIc(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: float  # m^2/s^2
    omega: float  # 1/s
    c_mu: float
    length_scale: float  # m


def compute_turbulence_ic(cond: FlowConditions, length_scale: float, c_mu: float = 0.09) -> TurbulenceIc:
    """
    Turbulence initial values from intensity and a length scale.

        k     = 1.5 * (U * I)**2
        omega = sqrt(k) / (c_mu**0.25 * L)

    Example:
        U=2.5 m/s, I=0.01, L=0.1 m  ->  k = 9.375e-4, omega ~ 0.5590
    """
    if length_scale <= 0:
        raise SolverError(f"turbulence length scale must be > 0, got {length_scale}")
    k = 1.5 * (cond.inlet_speed * cond.turbulence_intensity) ** 2
    omega = math.sqrt(k) / (c_mu**0.25 * length_scale)
    return TurbulenceIc(k=k, omega=omega, c_mu=c_mu, length_scale=length_scale)


@dataclass(frozen=True)
class LatticeUnits:
    """Conversion between lattice and physical units for one solve."""

    dx: float  # m
    dt: float  # s
    u_lattice: float  # inlet speed in lattice units
    tau: float  # BGK relaxation time
    nu_lattice: float
    clamped: bool  # viscosity raised to keep tau stable
    effective_viscosity: float  # m^2/s actually simulated

    @property
    def velocity_scale(self) -> float:
        return self.dx / self.dt

    def force_scale(self, density: float) -> float:
        """Lattice force -> N"""
        return density * self.dx**4 / self.dt**2

    def pressure_scale(self, density: float) -> float:
        """Lattice density deviation -> Pa (p = c_s^2 * (rho - 1))"""
        return density * self.velocity_scale**2 / 3.0


@dataclass(frozen=True, eq=False)
class FlowField:
    velocity: np.ndarray  # (nx, ny, nz, 3) m/s, zero in solid cells
    pressure: np.ndarray  # (nx, ny, nz) Pa gauge, zero in solid cells
    solid: np.ndarray  # (nx, ny, nz) bool
    origin: np.ndarray  # (3,) mm, center of cell (0, 0, 0)
    spacing: float  # mm
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))  # N on the body
    conditions: FlowConditions | None = None
    units: LatticeUnits | None = None
    residuals: tuple[float, ...] = ()
    steps: int = 0
    converged: bool = True
    mass_defect: float = 0.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pressure.shape


class DragReport(BaseModel):
    drag_force: float  # N, +x component
    lateral_force: tuple[float, float]  # N, y and z components
    reference_area: float  # m^2
    drag_coefficient: float
    iterations: int
    reynolds: float
    converged: bool
    tau: float | None = None
    effective_reynolds: float | None = None
    reynolds_clamped: bool = False


def drag_from_field(field: FlowField, body: TriMesh) -> DragReport:
    """
    Drag report from a solved field.

    The force is the momentum exchanged over the body links during the
    solve; the reference area is the body's frontal projection onto the
    plane normal to the flow.
    """
    if field.conditions is None:
        raise SolverError("field carries no flow conditions")
    cond = field.conditions
    area = body.frontal_area(axis=0) / 1e6
    lo, hi = body.bbox()
    length = float(hi[0] - lo[0]) / 1000.0

    drag = float(field.force[0])
    coefficient = 2.0 * drag / (cond.density * cond.inlet_speed**2 * area) if area > 0 else 0.0

    effective = None
    if field.units is not None:
        effective = cond.inlet_speed * length / field.units.effective_viscosity
    return DragReport(
        drag_force=drag,
        lateral_force=(float(field.force[1]), float(field.force[2])),
        reference_area=area,
        drag_coefficient=coefficient,
        iterations=field.steps,
        reynolds=cond.reynolds(length),
        converged=field.converged,
        tau=field.units.tau if field.units else None,
        effective_reynolds=effective,
        reynolds_clamped=field.units.clamped if field.units else False,
    )


# ============ VTK Export ============


def export_field(field: FlowField, path: str | Path) -> Path:
    """
    Write the field as VTK legacy ASCII structured points.

    Point data: "U" (m/s vectors), "p" (Pa) and "solid" (0/1). Points sit at
    cell centers; coordinates are in mm.
    """
    path = Path(path)
    nx, ny, nz = field.shape
    n = nx * ny * nz
    # VTK orders points with x varying fastest
    velocity = field.velocity.transpose(2, 1, 0, 3).reshape(-1, 3)
    pressure = field.pressure.transpose(2, 1, 0).ravel()
    solid = field.solid.transpose(2, 1, 0).ravel()

    lines = [
        "# vtk DataFile Version 3.0",
        "anvil flow field (U m/s, p Pa, coordinates mm)",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN {:.9g} {:.9g} {:.9g}".format(*field.origin),
        f"SPACING {field.spacing:.9g} {field.spacing:.9g} {field.spacing:.9g}",
        f"POINT_DATA {n}",
        "VECTORS U double",
    ]
    lines.extend(f"{u:.9g} {v:.9g} {w:.9g}" for u, v, w in velocity)
    lines.append("SCALARS p double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(f"{p:.9g}" for p in pressure)
    lines.append("SCALARS solid int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend("1" if s else "0" for s in solid)

    try:
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path


def read_field(path: str | Path) -> FlowField:
    """Re-import a field written by export_field (geometry and point data only)."""
    path = Path(path)
    try:
        tokens = path.read_text(encoding="ascii").split("\n")
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e

    header: dict[str, list[str]] = {}
    blocks: dict[str, list[str]] = {}
    i = 0
    while i < len(tokens):
        words = tokens[i].split()
        i += 1
        if not words:
            continue
        key = words[0]
        if key in ("DIMENSIONS", "ORIGIN", "SPACING", "POINT_DATA"):
            header[key] = words[1:]
        elif key == "VECTORS":
            n = int(header["POINT_DATA"][0])
            blocks[words[1]] = tokens[i : i + n]
            i += n
        elif key == "SCALARS":
            n = int(header["POINT_DATA"][0])
            blocks[words[1]] = tokens[i + 1 : i + 1 + n]
            i += 1 + n

    nx, ny, nz = (int(v) for v in header["DIMENSIONS"])

    def grid(values: np.ndarray, width: int) -> np.ndarray:
        shaped = values.reshape(nz, ny, nx, width) if width > 1 else values.reshape(nz, ny, nx)
        return shaped.transpose(2, 1, 0, 3) if width > 1 else shaped.transpose(2, 1, 0)

    velocity = grid(np.array([row.split() for row in blocks["U"]], dtype=np.float64), 3)
    pressure = grid(np.array(blocks["p"], dtype=np.float64), 1)
    solid = grid(np.array(blocks["solid"], dtype=np.int64), 1).astype(bool)
    return FlowField(
        velocity=np.ascontiguousarray(velocity),
        pressure=np.ascontiguousarray(pressure),
        solid=np.ascontiguousarray(solid),
        origin=np.array([float(v) for v in header["ORIGIN"]]),
        spacing=float(header["SPACING"][0]),
    )
