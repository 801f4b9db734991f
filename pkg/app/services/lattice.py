"""
app/services/lattice.py - Internal Lattice-Boltzmann Flow Solver

Desk-scale incompressible solver used when solver_backend=Internal.

Pipeline: Parameters → Geometry → Mesh → Solve
                                          ^^^^^
                                       (this file)

Scheme:
- D3Q19 velocity set, single-relaxation-time (BGK) collision
- Pull streaming through a precomputed gather map
- Half-way bounce-back on body links (stair-step wall, no snapping)
- Inlet (-x face): equilibrium populations at the inlet velocity
- Outlet (+x face): equilibrium at rest density (gauge pressure 0) with the
  velocity extrapolated from the neighbouring plane
- Remaining faces: specular reflection (symmetry)
- Optional constant body force (Guo forcing) for periodic channel runs

Drag is the momentum exchanged over the body links; convergence is the
relative change of drag over one check window.

Units: LatticeSolver works in lattice units (dx = dt = 1, rho = 1).
lbm_solve converts a VoxelGrid plus SI conditions in and a FlowField out.
"""

import math
from dataclasses import dataclass

import numpy as np
from loguru import logger

from app.core.errors import DivergedError, LatticeStabilityError, NotConvergedError, SolverError
from app.core.run_config import SolverSpec
from app.services.flow import FlowConditions, FlowField, LatticeUnits
from app.services.mesher import VoxelGrid

# ============ D3Q19 ============

C = np.array(
    [
        [0, 0, 0],
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0],
        [1, 0, 1], [-1, 0, -1], [1, 0, -1], [-1, 0, 1],
        [0, 1, 1], [0, -1, -1], [0, 1, -1], [0, -1, 1],
    ],
    dtype=np.int64,
)  # fmt: skip
W = np.array([1.0 / 3.0] + [1.0 / 18.0] * 6 + [1.0 / 36.0] * 12)
OPP = np.array([int(np.flatnonzero((C == -c).all(axis=1))[0]) for c in C])
Q = len(C)
CS = 1.0 / math.sqrt(3.0)

_CF = C.astype(np.float64)


def _code(vel: np.ndarray) -> np.ndarray:
    return ((vel[..., 0] + 1) * 3 + (vel[..., 1] + 1)) * 3 + (vel[..., 2] + 1)


_DIRECTION = np.full(27, -1, dtype=np.int64)
_DIRECTION[_code(C)] = np.arange(Q)

# Stable window for the BGK relaxation time
MIN_TAU = 0.51
MAX_TAU = 1.9
# tau used when the grid cannot resolve the requested Re and clamping is enabled
CLAMPED_TAU = 0.55
# tau targeted when the requested Re is so low that tau would exceed MAX_TAU
LOW_RE_TAU = 1.0
# Lattice Mach number treated as divergence
MAX_MACH = 0.3


def equilibrium(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """
    Second-order equilibrium populations.

    Args:
        rho: (N,) density
        u: (3, N) velocity

    Returns:
        (19, N) populations
    """
    cu = _CF @ u
    usq = (u * u).sum(axis=0)
    return W[:, None] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)


def _equilibrium_pairs(q: np.ndarray, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Equilibrium of one direction per node: q, rho of shape (P,), u of shape (3, P)."""
    cu = (_CF[q].T * u).sum(axis=0)
    usq = (u * u).sum(axis=0)
    return W[q] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)


@dataclass(frozen=True, eq=False)
class LatticeResult:
    rho: np.ndarray  # (nx, ny, nz)
    velocity: np.ndarray  # (nx, ny, nz, 3), lattice units
    force: np.ndarray  # (3,) on the body, lattice units
    steps: int
    converged: bool
    residuals: tuple[float, ...]
    mass_defect: float


class LatticeSolver:
    """
    BGK lattice-Boltzmann solver on a uniform grid.

    Args:
        solid: (nx, ny, nz) bool, True for body (or wall) nodes
        tau: Relaxation time; lattice viscosity is (tau - 0.5) / 3
        inlet_velocity: Inlet speed along +x in lattice units
        body_force: Constant force density applied to fluid nodes
        periodic: Per-axis periodicity. A non-periodic x axis has an inlet
            and an outlet; non-periodic y and z axes are symmetry planes.

    Example:
        solver = LatticeSolver(solid, tau=0.56, inlet_velocity=0.05)
        result = solver.run(max_steps=20000, residual_tol=1e-4)
        result.force[0]  # drag in lattice units
    """

    def __init__(
        self,
        solid: np.ndarray,
        tau: float,
        inlet_velocity: float = 0.0,
        body_force: tuple[float, float, float] = (0.0, 0.0, 0.0),
        periodic: tuple[bool, bool, bool] = (False, False, False),
    ) -> None:
        solid = np.asarray(solid, dtype=bool)
        if solid.ndim != 3:
            raise SolverError(f"solid mask must be 3-D, got shape {solid.shape}")
        if not periodic[0] and solid.shape[0] < 3:
            raise SolverError("an inlet/outlet lattice needs at least 3 nodes along x")
        if not MIN_TAU <= tau <= MAX_TAU:
            raise LatticeStabilityError(f"tau={tau:.4f} outside the stable window [{MIN_TAU}, {MAX_TAU}]")

        self.shape: tuple[int, int, int] = solid.shape
        self.solid = solid.ravel()
        self.fluid = ~self.solid
        self.tau = float(tau)
        self.inlet_velocity = float(inlet_velocity)
        self.periodic = tuple(bool(p) for p in periodic)

        n = self.solid.size
        force = np.asarray(body_force, dtype=np.float64)
        self._forced = bool(np.any(force != 0))
        self._force = force[:, None] * self.fluid[None, :]

        self._build_streaming()

        u0 = np.zeros((3, n))
        if not self.periodic[0]:
            u0[0, self.fluid] = self.inlet_velocity
        self.f = equilibrium(np.ones(n), u0)
        self.steps = 0

    @property
    def has_body(self) -> bool:
        return len(self._link_node) > 0

    def _build_streaming(self) -> None:
        dims = np.array(self.shape)
        n = self.solid.size
        nodes = np.arange(n)
        coords = np.indices(self.shape).reshape(3, -1).T
        stride_x = self.shape[1] * self.shape[2]

        self._src_dir = np.empty((Q, n), dtype=np.int64)
        self._src_node = np.empty((Q, n), dtype=np.int64)
        inlet: list[tuple[np.ndarray, np.ndarray]] = []
        outlet: list[tuple[np.ndarray, np.ndarray]] = []
        links: list[tuple[np.ndarray, np.ndarray]] = []

        for q in range(Q):
            src = coords - C[q]
            vel = np.tile(C[q], (n, 1))
            open_x = np.zeros(n, dtype=bool)
            for axis in range(3):
                if self.periodic[axis]:
                    src[:, axis] %= dims[axis]
                elif axis == 0:
                    open_x = (src[:, 0] < 0) | (src[:, 0] >= dims[0])
                else:
                    # Mirror image across the half-way symmetry plane
                    low = src[:, axis] < 0
                    high = src[:, axis] >= dims[axis]
                    src[low, axis] = -1 - src[low, axis]
                    src[high, axis] = 2 * dims[axis] - 1 - src[high, axis]
                    vel[low | high, axis] *= -1

            src[open_x] = coords[open_x]
            vel[open_x] = C[q]
            src_node = np.ravel_multi_index(src.T, self.shape)
            src_dir = _DIRECTION[_code(vel)]

            wall = self.fluid & ~open_x & self.solid[src_node]
            src_dir[wall] = OPP[q]
            src_node[wall] = nodes[wall]
            src_dir[self.solid] = q
            src_node[self.solid] = nodes[self.solid]
            self._src_dir[q] = src_dir
            self._src_node[q] = src_node

            # Population leaving node n along OPP[q] hits the wall and returns as q
            links.append((np.full(int(wall.sum()), OPP[q]), nodes[wall]))

            boundary = open_x & self.fluid
            if C[q, 0] > 0:
                inlet.append((np.full(int(boundary.sum()), q), nodes[boundary]))
            elif C[q, 0] < 0:
                outlet.append((np.full(int(boundary.sum()), q), nodes[boundary]))

        def stack(pairs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
            if not pairs:
                return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
            return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])

        self._in_q, self._in_n = stack(inlet)
        self._out_q, self._out_n = stack(outlet)
        self._in_ref = self._in_n + stride_x
        self._out_ref = self._out_n - stride_x
        self._link_dir, self._link_node = stack(links)
        self._link_c = _CF[self._link_dir]
        self._inlet_nodes = int(np.count_nonzero(self.fluid.reshape(self.shape)[0])) if not self.periodic[0] else 0

    # ============ Time stepping ============

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """(rho (N,), u (3, N)), including the half-force velocity shift."""
        rho = self.f.sum(axis=0)
        mom = _CF.T @ self.f
        if self._forced:
            mom = mom + 0.5 * self._force
        return rho, mom / rho

    def _guo_source(self, u: np.ndarray) -> np.ndarray:
        cu = _CF @ u
        cf = _CF @ self._force
        uf = (u * self._force).sum(axis=0)
        return (1.0 - 0.5 / self.tau) * W[:, None] * (3.0 * (cf - uf) + 9.0 * cu * cf)

    def step(self, measure: bool = False) -> np.ndarray | None:
        """
        Advance one time step.

        Returns:
            The momentum-exchange force on the body (3,) when measure is set
        """
        # 1. Collide
        rho, u = self.moments()
        post = self.f - (self.f - equilibrium(rho, u)) / self.tau
        if self._forced:
            post += self._guo_source(u)

        force = None
        if measure:
            outgoing = post[self._link_dir, self._link_node]
            force = 2.0 * (self._link_c * outgoing[:, None]).sum(axis=0)

        # 2. Stream (bounce-back and symmetry are part of the gather map)
        f = post[self._src_dir, self._src_node]

        # 3. Open boundaries
        if len(self._in_n):
            rho_in = f[:, self._in_ref].sum(axis=0)
            u_in = np.zeros((3, len(self._in_n)))
            u_in[0] = self.inlet_velocity
            f[self._in_q, self._in_n] = _equilibrium_pairs(self._in_q, rho_in, u_in)
        if len(self._out_n):
            ref = f[:, self._out_ref]
            u_out = (_CF.T @ ref) / ref.sum(axis=0)
            f[self._out_q, self._out_n] = _equilibrium_pairs(self._out_q, np.ones(len(self._out_n)), u_out)

        self.f = f
        self.steps += 1
        return force

    def mass(self) -> float:
        return float(self.f[:, self.fluid].sum())

    def run(self, max_steps: int, residual_tol: float, check_interval: int = 100) -> LatticeResult:
        """
        Step until the residual drops below residual_tol or max_steps is reached.

        The residual is the relative drag change over one check window when
        the lattice has body links, else the relative change of the velocity
        field (periodic channels and empty domains).

        Raises:
            DivergedError: On non-finite populations or lattice Mach > 0.3
        """
        residuals: list[float] = []
        previous_drag: float | None = None
        previous_u: np.ndarray | None = None
        previous_mass = self.mass()
        force = np.zeros(3)
        mass_defect = 0.0
        converged = False

        for step in range(1, max_steps + 1):
            measure = step % check_interval == 0 or step == max_steps
            measured = self.step(measure=measure)
            if not measure:
                continue
            force = measured if measured is not None else np.zeros(3)

            if not np.all(np.isfinite(self.f)):
                raise DivergedError(f"non-finite populations at step {step}")
            _, u = self.moments()
            mach = float(np.sqrt((u * u).sum(axis=0).max())) / CS
            if mach > MAX_MACH:
                raise DivergedError(f"lattice Mach {mach:.3f} exceeds {MAX_MACH} at step {step}")

            # Mass drift per step relative to the inflow rate
            mass = self.mass()
            inflow = self.inlet_velocity * self._inlet_nodes if self._inlet_nodes else mass
            mass_defect = abs(mass - previous_mass) / (check_interval * inflow) if inflow > 0 else 0.0
            previous_mass = mass

            if self.has_body:
                drag = float(force[0])
                residual = (
                    math.inf if previous_drag is None else abs(drag - previous_drag) / max(abs(drag), 1e-300)
                )
                previous_drag = drag
            else:
                velocity = u[:, self.fluid]
                residual = (
                    math.inf
                    if previous_u is None
                    else float(np.linalg.norm(velocity - previous_u) / max(np.linalg.norm(velocity), 1e-300))
                )
                previous_u = velocity
            residuals.append(residual)
            logger.debug(f"lbm step={step} residual={residual:.3e} drag={force[0]:.6e} mach={mach:.4f}")

            if residual < residual_tol:
                converged = True
                break

        rho, u = self.moments()
        velocity = np.where(self.fluid[None, :], u, 0.0).T.reshape(*self.shape, 3)
        return LatticeResult(
            rho=np.where(self.fluid, rho, 1.0).reshape(self.shape),
            velocity=velocity,
            force=np.asarray(force, dtype=np.float64),
            steps=self.steps,
            converged=converged,
            residuals=tuple(residuals),
            mass_defect=mass_defect,
        )


# ============ Physical wrapper ============


def lattice_units(spacing_m: float, cond: FlowConditions, opts: SolverSpec) -> LatticeUnits:
    """
    Choose the time step and relaxation time for one solve.

    The inlet maps to opts.lattice_velocity. When that leaves tau above the
    stable window (very low Re) the lattice velocity is reduced until tau is
    1. When tau falls below the window the grid cannot resolve the Re: that is
    an error unless opts.clamp_reynolds, in which case the viscosity is raised
    and the effective Re is reported.

    Raises:
        LatticeStabilityError: If tau < 0.51 and clamping is disabled
    """
    dx = spacing_m
    nu = cond.kinematic_viscosity
    u_lattice = opts.lattice_velocity
    dt = u_lattice * dx / cond.inlet_speed
    nu_lattice = nu * dt / dx**2
    tau = 3.0 * nu_lattice + 0.5

    if tau > MAX_TAU:
        nu_lattice = (LOW_RE_TAU - 0.5) / 3.0
        dt = nu_lattice * dx**2 / nu
        u_lattice = cond.inlet_speed * dt / dx
        tau = LOW_RE_TAU
        logger.info(f"low Reynolds number: lattice velocity reduced to {u_lattice:.3e}")

    clamped = False
    effective = nu
    if tau < MIN_TAU:
        if not opts.clamp_reynolds:
            raise LatticeStabilityError(
                f"tau={tau:.5f} is below {MIN_TAU}: the lattice is too coarse for this Reynolds number "
                "(refine mesh.lattice_level or set solver.clamp_reynolds)"
            )
        tau = CLAMPED_TAU
        nu_lattice = (tau - 0.5) / 3.0
        effective = nu_lattice * dx**2 / dt
        clamped = True
        logger.warning(f"Reynolds number clamped: viscosity raised from {nu:.3e} to {effective:.3e} m^2/s")

    return LatticeUnits(
        dx=dx,
        dt=dt,
        u_lattice=u_lattice,
        tau=tau,
        nu_lattice=nu_lattice,
        clamped=clamped,
        effective_viscosity=effective,
    )


def lbm_solve(grid: VoxelGrid, cond: FlowConditions, opts: SolverSpec) -> FlowField:
    """
    Solve steady flow around the solid voxels of a grid.

    Args:
        grid: Voxelized fluid region (flow along +x)
        cond: Free-stream conditions
        opts: Step limit, residual tolerance, lattice velocity and clamping

    Returns:
        FlowField in SI units carrying the body force

    Raises:
        LatticeStabilityError: If no stable relaxation time exists
        DivergedError: If the solve blows up
        NotConvergedError: If max_steps is reached first (the partial field is attached)
    """
    units = lattice_units(grid.spacing / 1000.0, cond, opts)
    logger.info(
        f"lbm grid={grid.shape} tau={units.tau:.4f} u_lattice={units.u_lattice:.4f} "
        f"dt={units.dt:.3e}s clamped={units.clamped}"
    )

    solver = LatticeSolver(grid.solid, units.tau, inlet_velocity=units.u_lattice)
    result = solver.run(opts.max_steps, opts.residual_tol, opts.check_interval)

    solid = grid.solid.astype(bool)
    velocity = result.velocity * units.velocity_scale
    pressure = np.where(solid, 0.0, (result.rho - 1.0) * units.pressure_scale(cond.density))
    field = FlowField(
        velocity=velocity,
        pressure=pressure,
        solid=solid,
        origin=np.asarray(grid.origin, dtype=np.float64) + 0.5 * grid.spacing,
        spacing=grid.spacing,
        force=result.force * units.force_scale(cond.density),
        conditions=cond,
        units=units,
        residuals=result.residuals,
        steps=result.steps,
        converged=result.converged,
        mass_defect=result.mass_defect,
    )
    if not result.converged:
        raise NotConvergedError(opts.max_steps, field)
    logger.info(f"lbm converged steps={result.steps} drag={field.force[0]:.6e}N")
    return field


def poiseuille_profile(
    height: int,
    tau: float = 1.0,
    acceleration: float = 1e-6,
    max_steps: int = 40000,
    residual_tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Channel verification run.

    A channel of `height` fluid nodes between two bounce-back walls, periodic
    along x and z and driven by a uniform body force. The walls sit half a
    node outside the outermost fluid nodes.

    Returns:
        (simulated u_x per fluid row, analytic g / (2 nu) * y * (H - y))
    """
    solid = np.zeros((1, height + 2, 1), dtype=bool)
    solid[:, 0, :] = True
    solid[:, -1, :] = True
    solver = LatticeSolver(solid, tau, body_force=(acceleration, 0.0, 0.0), periodic=(True, False, True))
    result = solver.run(max_steps, residual_tol)

    nu = (tau - 0.5) / 3.0
    y = np.arange(1, height + 1) - 0.5
    analytic = acceleration / (2.0 * nu) * y * (height - y)
    return result.velocity[0, 1:-1, 0, 0], analytic
