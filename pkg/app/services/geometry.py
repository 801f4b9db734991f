"""
app/services/geometry.py - Parametric Seed Designs

Instantiates closed triangle surfaces (mm) from parameter tables for the
built-in seed designs, and rescales external STL bodies.

Pipeline: Parameters → Geometry → Mesh → Solve
                       ^^^^^^^^
                     (this file)

Seed designs:
- RevolvedHull: a 1 m body of revolution whose nose profile passes through
  six radial control points; the tail closes the profile to a point.
- WingedBody: hemispherical nose, cylindrical fuselage and conical tail with
  two rectangular wing slabs at mid-fuselage.
- ExternalStl: any STL, scaled uniformly to a target body length.

The flow axis is +x; every body starts at x = 0. Surfaces are assembled from
analytic patches whose shared edges are sampled identically, then welded.
"""

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.interpolate import CubicHermiteSpline

from app.core.errors import (
    DegenerateProfileError,
    NonPositiveParamError,
    OutOfBoundsError,
    ResolutionTooLowError,
    SelfIntersectionError,
)
from app.core.run_config import SeedDesign
from app.services.parameters import ParameterEntry, ParameterTable
from app.services.surface import TriMesh

NOSE_CONTROL_POINTS = 6
HULL_TOTAL_LENGTH_MM = 1000.0
MAX_CONTROL_POINT_M = 0.2

# Interior radii are floored here so a zero control point pinches no ring to a point (mm)
MIN_INTERIOR_RADIUS_MM = 0.1

# Stations closer than this are merged (mm / rad)
_STATION_EPS = 1e-6


# ============ Parameter Types ============


class HullParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    control_points: tuple[float, float, float, float, float, float]  # m
    nose_length: float  # mm
    total_length: float = HULL_TOTAL_LENGTH_MM  # mm

    @model_validator(mode="after")
    def _check(self) -> "HullParams":
        for i, cp in enumerate(self.control_points):
            if not 0.0 <= cp <= MAX_CONTROL_POINT_M:
                raise OutOfBoundsError(f"cp{i + 1}", cp, 0.0, MAX_CONTROL_POINT_M)
        if not 0.0 < self.nose_length < self.total_length:
            raise OutOfBoundsError("nose_length", self.nose_length, 0.0, self.total_length)
        return self

    @property
    def tail_length(self) -> float:
        return self.total_length - self.nose_length


class WingedBodyParams(BaseModel):
    """All lengths in mm."""

    model_config = ConfigDict(frozen=True)

    nose_radius: float
    fuselage_length: float
    tail_length: float
    thickness_wing: float
    half_span: float
    chord: float

    @model_validator(mode="after")
    def _check(self) -> "WingedBodyParams":
        for name, value in self.model_dump().items():
            if not value > 0:
                raise NonPositiveParamError(f"{name}={value} must be > 0")
        return self


# ============ Assembly Helpers ============


def _merge_close(values: np.ndarray, eps: float = _STATION_EPS) -> np.ndarray:
    """Sort and drop values within eps of their predecessor."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    keep = np.concatenate(([True], np.diff(values) > eps))
    return values[keep]


def _quads(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
    """Split quads (p0, p1, p2, p3), each (K, 3), into (2K, 3, 3) triangles."""
    first = np.stack([p0, p1, p2], axis=1)
    second = np.stack([p0, p2, p3], axis=1)
    return np.concatenate([first, second])


def _orient(corners: np.ndarray, outward: np.ndarray) -> np.ndarray:
    """Flip triangles whose normal points against the given outward direction."""
    normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    flip = np.einsum("ij,ij->i", normal, np.broadcast_to(outward, normal.shape)) < 0
    corners = corners.copy()
    corners[flip] = corners[flip][:, [0, 2, 1]]
    return corners


def _radial(corners: np.ndarray) -> np.ndarray:
    """Outward direction away from the x axis at each triangle centroid."""
    centroid = corners.mean(axis=1)
    centroid[:, 0] = 0.0
    return centroid


def _revolve(
    xs: np.ndarray,
    radii: np.ndarray,
    phis: np.ndarray,
    skip: np.ndarray | None = None,
) -> np.ndarray:
    """
    Triangle soup of a closed surface of revolution about the x axis.

    Args:
        xs: Axial stations; the first and last are the tips (radius ignored)
        radii: Ring radius at each station
        phis: Angular samples in increasing order
        skip: Optional (stations-1, len(phis)) mask of bands to leave open

    Returns:
        (M, 3, 3) outward-oriented triangle corners
    """
    n_phi = len(phis)
    cos, sin = np.cos(phis), np.sin(phis)
    j = np.arange(n_phi)
    jn = (j + 1) % n_phi
    pieces = []

    def ring(i: int, idx: np.ndarray) -> np.ndarray:
        return np.stack([np.full(len(idx), xs[i]), radii[i] * cos[idx], radii[i] * sin[idx]], axis=1)

    # 1. Bands between interior rings
    for i in range(1, len(xs) - 2):
        mask = np.ones(n_phi, dtype=bool) if skip is None else ~skip[i]
        a, b = j[mask], jn[mask]
        pieces.append(_quads(ring(i, a), ring(i, b), ring(i + 1, b), ring(i + 1, a)))

    # 2. Fans to both tips
    for tip, i in ((0, 1), (len(xs) - 1, len(xs) - 2)):
        apex = np.tile([xs[tip], 0.0, 0.0], (n_phi, 1))
        pieces.append(np.stack([apex, ring(i, j), ring(i, jn)], axis=1))

    corners = np.concatenate(pieces)
    return _orient(corners, _radial(corners))


# ============ Revolved Hull ============


def hull_profile(p: HullParams) -> CubicHermiteSpline:
    """
    Radius (mm) as a function of axial position (mm).

    Knots: the nose tip, six control points spaced uniformly over the nose
    (the sixth sits at the nose/tail junction) and the tail tip. Slopes are
    zero at every knot, so each segment stays between its end radii: no
    overshoot below zero, and the radius at every x is non-decreasing in
    every control point.
    """
    step = p.nose_length / NOSE_CONTROL_POINTS
    knots = np.array([step * i for i in range(NOSE_CONTROL_POINTS + 1)] + [p.total_length])
    radii = np.array([0.0] + [cp * 1000.0 for cp in p.control_points] + [0.0])
    return CubicHermiteSpline(knots, radii, np.zeros_like(radii))


def instantiate_hull(p: HullParams, n_theta: int = 64, n_axial: int = 128) -> TriMesh:
    """
    Build the revolved hull surface.

    Args:
        p: Hull parameters
        n_theta: Angular segments (>= 3)
        n_axial: Uniform axial segments; profile knots are always added

    Returns:
        Watertight, outward-oriented TriMesh in mm

    Raises:
        DegenerateProfileError: If every control point is zero
        ResolutionTooLowError: If n_theta < 3

    Example:
        mesh = instantiate_hull(HullParams(control_points=(0.1,) * 6, nose_length=500.0))
    """
    if n_theta < 3:
        raise ResolutionTooLowError(f"n_theta={n_theta}, need at least 3 angular segments")
    if n_axial < 1:
        raise ResolutionTooLowError(f"n_axial={n_axial}, need at least 1 axial segment")
    if all(cp == 0.0 for cp in p.control_points):
        raise DegenerateProfileError("all control points are zero; the body has no volume")

    profile = hull_profile(p)
    xs = _merge_close(np.concatenate([np.linspace(0.0, p.total_length, n_axial + 1), profile.x]), 1e-3)
    radii = np.maximum(profile(xs), MIN_INTERIOR_RADIUS_MM)
    radii[0] = radii[-1] = 0.0

    phis = 2.0 * np.pi * np.arange(n_theta) / n_theta
    return TriMesh.from_soup(_revolve(xs, radii, phis))


def hull_params_from_table(table: ParameterTable) -> HullParams:
    """Control points are stored in mm (cp1..cp6) and converted to m."""
    values = table.defaults()
    return HullParams(
        control_points=tuple(values[f"cp{i + 1}"] / 1000.0 for i in range(NOSE_CONTROL_POINTS)),
        nose_length=values["nose_length"],
    )


# ============ Winged Body ============


def _points(x: np.ndarray | float, y: np.ndarray | float, z: np.ndarray | float) -> np.ndarray:
    """Stack broadcast coordinates into (K, 3) points."""
    return np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)), axis=-1)


def _wing(
    xw: np.ndarray,
    arc_y: np.ndarray,
    arc_z: np.ndarray,
    tip_y: float,
) -> np.ndarray:
    """
    Triangle soup of one wing slab, open where it meets the fuselage.

    Args:
        xw: Axial stations from leading to trailing edge (shared with the fuselage)
        arc_y, arc_z: Fuselage points along the root, ordered bottom to top
        tip_y: Spanwise coordinate of the tip face

    Returns:
        (M, 3, 3) outward-oriented triangle corners
    """
    side = np.sign(tip_y)
    x0, x1 = xw[:-1], xw[1:]
    pieces = []

    # 1. Top and bottom faces
    for k, sense in ((len(arc_z) - 1, 1.0), (0, -1.0)):
        faces = _quads(
            _points(x0, arc_y[k], arc_z[k]),
            _points(x1, arc_y[k], arc_z[k]),
            _points(x1, tip_y, arc_z[k]),
            _points(x0, tip_y, arc_z[k]),
        )
        pieces.append(_orient(faces, np.array([0.0, 0.0, sense])))

    # 2. Tip face
    z0, z1 = arc_z[:-1], arc_z[1:]
    gx0, gz0 = np.meshgrid(x0, z0, indexing="ij")
    gx1, gz1 = np.meshgrid(x1, z1, indexing="ij")
    gx0, gz0, gx1, gz1 = gx0.ravel(), gz0.ravel(), gx1.ravel(), gz1.ravel()
    faces = _quads(
        _points(gx0, tip_y, gz0),
        _points(gx1, tip_y, gz0),
        _points(gx1, tip_y, gz1),
        _points(gx0, tip_y, gz1),
    )
    pieces.append(_orient(faces, np.array([0.0, side, 0.0])))

    # 3. Leading and trailing faces
    for x, sense in ((xw[0], -1.0), (xw[-1], 1.0)):
        faces = _quads(
            _points(x, arc_y[:-1], z0),
            _points(x, arc_y[1:], z1),
            _points(x, tip_y, z1),
            _points(x, tip_y, z0),
        )
        pieces.append(_orient(faces, np.array([sense, 0.0, 0.0])))

    return np.concatenate(pieces)


def instantiate_winged(
    p: WingedBodyParams,
    n_theta: int = 64,
    n_axial: int = 32,
    include_wings: bool = True,
) -> TriMesh:
    """
    Build the winged body: hemisphere + cylinder + cone, plus two wing slabs.

    The nose tip sits at x = 0. Wings are centered at mid-fuselage, span
    along +y and -y, and are `thickness_wing` thick in z. The fuselage
    surface is cut exactly where the slabs enter it, so the union is a
    single closed surface.

    Args:
        p: Winged-body parameters (mm)
        n_theta: Angular segments, rounded up to a multiple of 4
        n_axial: Axial segments on the cylinder and on the cone
        include_wings: Build the bare fuselage when False

    Raises:
        SelfIntersectionError: If the chord exceeds the fuselage length or
                               the wing is as thick as the fuselage
        ResolutionTooLowError: If n_theta < 3
    """
    if n_theta < 3:
        raise ResolutionTooLowError(f"n_theta={n_theta}, need at least 3 angular segments")
    if p.chord > p.fuselage_length:
        raise SelfIntersectionError(f"chord {p.chord} mm exceeds fuselage length {p.fuselage_length} mm")
    if p.thickness_wing >= 2.0 * p.nose_radius:
        raise SelfIntersectionError(
            f"wing thickness {p.thickness_wing} mm does not fit fuselage diameter {2.0 * p.nose_radius} mm"
        )

    r, lf, lt = p.nose_radius, p.fuselage_length, p.tail_length
    n_theta = 4 * int(np.ceil(n_theta / 4))
    n_axial = max(n_axial, 1)

    # 1. Angular samples on [-pi/2, 3pi/2), with the wing roots inserted
    alpha = float(np.arcsin(p.thickness_wing / (2.0 * r)))
    phis = -0.5 * np.pi + 2.0 * np.pi * np.arange(n_theta) / n_theta
    if include_wings:
        phis = _merge_close(np.concatenate([phis, [-alpha, alpha, np.pi - alpha, np.pi + alpha]]))

    # 2. Axial stations: hemisphere rings, cylinder (with wing edges), cone
    n_polar = max(n_theta // 4, 2)
    beta = 0.5 * np.pi * np.arange(1, n_polar) / n_polar
    x_nose = r - r * np.cos(beta)
    r_nose = r * np.sin(beta)

    xc = r + 0.5 * lf
    x_le, x_te = xc - 0.5 * p.chord, xc + 0.5 * p.chord
    x_cyl = np.linspace(r, r + lf, n_axial + 1)
    if include_wings:
        x_cyl = _merge_close(np.concatenate([x_cyl, [x_le, x_te]]))

    frac = np.arange(1, n_axial + 1) / n_axial
    x_tail = r + lf + lt * frac
    r_tail = r * (1.0 - frac)

    xs = np.concatenate([[0.0], x_nose, x_cyl, x_tail])
    radii = np.concatenate([[0.0], r_nose, np.full(len(x_cyl), r), r_tail])

    if not include_wings:
        return TriMesh.from_soup(_revolve(xs, radii, phis))

    # 3. Open the fuselage where the wings enter
    j_right = (int(np.argmin(np.abs(phis + alpha))), int(np.argmin(np.abs(phis - alpha))))
    j_left = (int(np.argmin(np.abs(phis - (np.pi - alpha)))), int(np.argmin(np.abs(phis - (np.pi + alpha)))))
    in_chord = (xs[:-1] >= x_le - _STATION_EPS) & (xs[1:] <= x_te + _STATION_EPS)
    in_root = np.zeros(len(phis), dtype=bool)
    in_root[j_right[0] : j_right[1]] = True
    in_root[j_left[0] : j_left[1]] = True
    skip = in_chord[:, None] & in_root[None, :]
    # Tip bands are fans and never cut
    skip[0] = skip[-1] = False

    pieces = [_revolve(xs, radii, phis, skip)]

    # 4. Wing slabs, sharing the fuselage's stations along their roots
    xw = xs[(xs >= x_le - _STATION_EPS) & (xs <= x_te + _STATION_EPS)]
    tip_offset = r + p.half_span
    for (j0, j1), tip_y in ((j_right, tip_offset), (j_left, -tip_offset)):
        arc = np.arange(j0, j1 + 1)
        arc_y, arc_z = r * np.cos(phis[arc]), r * np.sin(phis[arc])
        order = np.argsort(arc_z)
        pieces.append(_wing(xw, arc_y[order], arc_z[order], tip_y))

    return TriMesh.from_soup(np.concatenate(pieces))


def winged_params_from_table(table: ParameterTable) -> WingedBodyParams:
    return WingedBodyParams(**table.defaults())


# ============ External STL ============


def external_table(mesh: TriMesh) -> ParameterTable:
    """Single-row table for an external body: its flow-axis length (mm)."""
    lo, hi = mesh.bbox()
    length = float(hi[0] - lo[0])
    return ParameterTable(
        entries=(ParameterEntry(name="body_length", default=length, min=min(1.0, length), max=max(1e5, length)),)
    )


def scale_to_length(mesh: TriMesh, body_length: float) -> TriMesh:
    """Scale uniformly about the bounding-box minimum so the x extent equals body_length (mm)."""
    lo, hi = mesh.bbox()
    extent = float(hi[0] - lo[0])
    if extent <= 0 or body_length <= 0:
        raise NonPositiveParamError(f"cannot scale body of length {extent} mm to {body_length} mm")
    return mesh.translated(-lo).scaled(body_length / extent).translated(lo)


# ============ Dispatch ============


def geometry_for(
    seed: SeedDesign,
    table: ParameterTable,
    external: TriMesh | None = None,
    n_theta: int = 64,
    n_axial: int = 64,
) -> TriMesh:
    """
    Instantiate the seed design from its (already assigned) parameter table.

    Args:
        seed: Which seed design
        table: Parameter table with the design's values as defaults
        external: The loaded STL for seed=ExternalStl
        n_theta, n_axial: Surface resolution for the built-in designs
    """
    if seed == SeedDesign.REVOLVED_HULL:
        return instantiate_hull(hull_params_from_table(table), n_theta=n_theta, n_axial=n_axial)
    if seed == SeedDesign.WINGED_BODY:
        return instantiate_winged(winged_params_from_table(table), n_theta=n_theta, n_axial=n_axial)
    if external is None:
        raise NonPositiveParamError("seed design ExternalStl needs a loaded STL body")
    return scale_to_length(external, table.get("body_length").default)
