"""
app/services/mesher.py - Castellated Hexahedral Meshing

Builds the volume mesh the flow solvers run on, in the spirit of the
blockMesh + snappyHexMesh two-step workflow:

Pipeline: Parameters → Geometry → Mesh → Solve
                                  ^^^^
                               (this file)

1. block_mesh: uniform background hexahedra filling the domain box
2. castellate: split cells cut by the body surface (octree, 2:1 balanced),
   drop cells whose centroid is inside the body and keep the single fluid
   region connected to the inlet
3. quality_check: aspect ratio, non-orthogonality and skewness per cell
4. auto_mesh: retry with doubled base counts whenever a stage fails

There is no snapping: the body boundary is the stair-step surface of removed
cells.

The mesh is an octree leaf set. Every leaf is (level, i, j, k) where
(i, j, k) indexes the uniform grid of that level (base_cells * 2**level per
axis). Leaves removed during castellation stay in the set with a non-fluid
state so volumes can always be accounted for exactly.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.core.errors import (
    AutoMeshExhaustedError,
    IoFailureError,
    MeshError,
    MeshFailure,
    NonWatertightInputError,
)
from app.core.run_config import MeshSpec, QualitySpec
from app.services.surface import TriMesh

# A body must cover at least this many base-cell centroids to be meshed
MIN_INSIDE_BASE_CELLS = 8

# Fixed seed for the jittered fallback rays, so classification is reproducible
_JITTER_SEED = 20240917

_CHILD_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


class Patch(IntEnum):
    INTERIOR = 0
    INLET = 1
    OUTLET = 2
    SYMMETRY = 3
    BODY = 4


PATCH_NAMES = {Patch.INLET: "inlet", Patch.OUTLET: "outlet", Patch.SYMMETRY: "symmetry", Patch.BODY: "body"}


class CellState(IntEnum):
    FLUID = 0
    INSIDE = 1  # centroid inside the body
    DISCONNECTED = 2  # fluid pocket not connected to the inlet region
    QUALITY = 3  # removed by the quality stage


class MeshStage(str, Enum):
    CASTELLATION = "Castellation"
    REFINEMENT = "Refinement"
    QUALITY = "Quality"


# ============ Domain Box ============


@dataclass(frozen=True)
class DomainBox:
    lo: tuple[float, float, float]  # mm
    hi: tuple[float, float, float]  # mm

    def __post_init__(self) -> None:
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise MeshError(f"degenerate domain box {self.lo} .. {self.hi}")

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.lo, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.hi, dtype=np.float64)

    @property
    def size(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def strictly_contains(self, lo: np.ndarray, hi: np.ndarray) -> bool:
        return bool(np.all(self.lower < lo) and np.all(hi < self.upper))


def domain_box(body: TriMesh, spec: MeshSpec) -> DomainBox:
    """
    Domain around a body, padded by multiples of its largest extent.

    The inlet (-x) lies `upstream` extents ahead of the body, the outlet
    `downstream` extents behind it and every lateral face `lateral` extents
    away. The box is then grown (downstream and symmetrically sideways) so
    that base cells are cubes.
    """
    lo, hi = body.bbox()
    extent = float(np.max(hi - lo))
    scale = spec.domain_scale
    box_lo = np.array([lo[0] - scale.upstream * extent, lo[1] - scale.lateral * extent, lo[2] - scale.lateral * extent])
    box_hi = np.array(
        [hi[0] + scale.downstream * extent, hi[1] + scale.lateral * extent, hi[2] + scale.lateral * extent]
    )

    counts = np.array(spec.base_cells, dtype=np.float64)
    h = float(np.max((box_hi - box_lo) / counts))
    grow = h * counts - (box_hi - box_lo)
    box_hi[0] += grow[0]
    box_lo[1:] -= 0.5 * grow[1:]
    box_hi[1:] += 0.5 * grow[1:]
    return DomainBox(tuple(box_lo.tolist()), tuple(box_hi.tolist()))


# ============ Leaf Index ============


class _LeafIndex:
    """Sorted integer codes of (level, i, j, k) for vectorized leaf lookup."""

    def __init__(self, base: np.ndarray, level: np.ndarray, ijk: np.ndarray) -> None:
        self.base = np.asarray(base, dtype=np.int64)
        self.max_level = int(level.max()) if len(level) else 0
        per_level = int(np.prod(self.base)) * 8 ** np.arange(self.max_level + 2, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(per_level)])
        codes = self.encode(level, ijk)
        self.order = np.argsort(codes, kind="stable")
        self.sorted = codes[self.order]

    def encode(self, level: np.ndarray, ijk: np.ndarray) -> np.ndarray:
        dims = self.base[None, :] << level[:, None]
        return self.offsets[level] + (ijk[:, 0] * dims[:, 1] + ijk[:, 1]) * dims[:, 2] + ijk[:, 2]

    def find(self, level: np.ndarray, ijk: np.ndarray) -> np.ndarray:
        """Leaf index at exactly (level, ijk), or -1."""
        level = np.asarray(level, dtype=np.int64)
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(level), -1, dtype=np.int64)
        if len(self.sorted) == 0 or len(level) == 0:
            return out
        dims = self.base[None, :] << np.clip(level, 0, self.max_level)[:, None]
        ok = (level >= 0) & (level <= self.max_level) & np.all((ijk >= 0) & (ijk < dims), axis=1)
        if not ok.any():
            return out
        codes = self.encode(level[ok], ijk[ok])
        pos = np.minimum(np.searchsorted(self.sorted, codes), len(self.sorted) - 1)
        out[ok] = np.where(self.sorted[pos] == codes, self.order[pos], -1)
        return out


def _canonical(base: np.ndarray, level: np.ndarray, ijk: np.ndarray, *extra: np.ndarray) -> tuple[np.ndarray, ...]:
    """Sort leaves (and aligned arrays) by code so results never depend on construction order."""
    order = np.argsort(_LeafIndex(base, level, ijk).encode(level, ijk), kind="stable")
    return (level[order], ijk[order], *(e[order] for e in extra))


# ============ Faces ============


@dataclass(frozen=True)
class FaceSet:
    """Faces of the fluid cells. Normals point from owner to neighbour (or out of the domain)."""

    owner: np.ndarray  # (F,) leaf index
    neighbour: np.ndarray  # (F,) leaf index, -1 on patches
    patch: np.ndarray  # (F,) Patch
    axis: np.ndarray  # (F,) 0..2
    sign: np.ndarray  # (F,) -1 / +1
    area: np.ndarray  # (F,) mm^2
    center: np.ndarray  # (F, 3) mm

    def count(self, patch: Patch) -> int:
        return int(np.count_nonzero(self.patch == patch))


# ============ Hex Mesh ============


@dataclass(frozen=True, eq=False)
class HexMesh:
    box: DomainBox
    base_cells: tuple[int, int, int]
    level: np.ndarray  # (L,) int64
    ijk: np.ndarray  # (L, 3) int64
    state: np.ndarray  # (L,) CellState
    cut: np.ndarray  # (L,) leaf intersects the body surface

    @property
    def base(self) -> np.ndarray:
        return np.array(self.base_cells, dtype=np.int64)

    @property
    def base_size(self) -> np.ndarray:
        """Edge lengths of a level-0 cell (mm)."""
        return self.box.size / self.base

    @property
    def max_level(self) -> int:
        return int(self.level.max()) if len(self.level) else 0

    @property
    def fluid(self) -> np.ndarray:
        return self.state == CellState.FLUID

    @property
    def cell_count(self) -> int:
        return int(np.count_nonzero(self.fluid))

    @property
    def sizes(self) -> np.ndarray:
        """(L, 3) cell edge lengths (mm)."""
        return self.base_size[None, :] / (1 << self.level)[:, None]

    @property
    def centroids(self) -> np.ndarray:
        return self.box.lower + (self.ijk + 0.5) * self.sizes

    @cached_property
    def index(self) -> _LeafIndex:
        return _LeafIndex(self.base, self.level, self.ijk)

    @cached_property
    def faces(self) -> FaceSet:
        return _enumerate_faces(self)

    def with_state(self, state: np.ndarray) -> "HexMesh":
        return HexMesh(self.box, self.base_cells, self.level, self.ijk, state, self.cut)

    def volume_units(self) -> dict[str, int]:
        """
        Exact volume accounting in units of finest-level cells.

        fluid + surface + removed == total, where surface counts kept cells cut
        by the body and removed counts every non-fluid leaf.
        """
        units = (8 ** (self.max_level - self.level)).astype(np.int64)
        kept = self.fluid
        return {
            "fluid": int(units[kept & ~self.cut].sum()),
            "surface": int(units[kept & self.cut].sum()),
            "removed": int(units[~kept].sum()),
            "total": int(np.prod(self.base)) * 8**self.max_level,
        }

    def patch_counts(self) -> dict[str, int]:
        return {name: self.faces.count(patch) for patch, name in PATCH_NAMES.items()}


def _enumerate_faces(mesh: HexMesh) -> FaceSet:
    """
    Walk the six directions of every fluid leaf.

    A same-level interior face is recorded from its -side owner only; a
    coarse/fine face from the fine side; a face towards a non-fluid leaf is
    a body face with the area of the smaller of the two leaves.
    """
    fluid_idx = np.flatnonzero(mesh.fluid)
    lv_all, ijk_all = mesh.level[fluid_idx], mesh.ijk[fluid_idx]
    size_all = mesh.sizes[fluid_idx]
    centroid_all = mesh.centroids[fluid_idx]
    is_fluid = mesh.fluid
    index = mesh.index

    owners, neighbours, patches, axes, signs, areas, centers = [], [], [], [], [], [], []

    def add(owner, neighbour, patch, axis, sign, area, center):
        owners.append(owner)
        neighbours.append(neighbour)
        patches.append(np.broadcast_to(np.asarray(patch, dtype=np.int8), owner.shape).copy())
        axes.append(np.full(len(owner), axis, dtype=np.int8))
        signs.append(np.full(len(owner), sign, dtype=np.int8))
        areas.append(area)
        centers.append(center)

    for axis in range(3):
        lat = [a for a in range(3) if a != axis]
        for sign in (-1, 1):
            pos = ijk_all.copy()
            pos[:, axis] += sign
            dims = mesh.base[axis] << lv_all
            face_center = centroid_all.copy()
            face_center[:, axis] += 0.5 * sign * size_all[:, axis]
            face_area = size_all[:, lat[0]] * size_all[:, lat[1]]

            # 1. Domain boundary
            outside = (pos[:, axis] < 0) | (pos[:, axis] >= dims)
            if axis == 0:
                patch = Patch.INLET if sign < 0 else Patch.OUTLET
            else:
                patch = Patch.SYMMETRY
            add(fluid_idx[outside], np.full(int(outside.sum()), -1), patch, axis, sign,
                face_area[outside], face_center[outside])

            rest = np.flatnonzero(~outside)

            # 2. Same-level neighbour
            same = index.find(lv_all[rest], pos[rest])
            hit = same >= 0
            r, m = rest[hit], same[hit]
            interior = is_fluid[m] & (sign > 0)
            add(fluid_idx[r[interior]], m[interior], Patch.INTERIOR, axis, sign,
                face_area[r[interior]], face_center[r[interior]])
            wall = ~is_fluid[m]
            add(fluid_idx[r[wall]], np.full(int(wall.sum()), -1), Patch.BODY, axis, sign,
                face_area[r[wall]], face_center[r[wall]])
            rest = rest[~hit]

            # 3. Coarser neighbour, recorded from this (fine) side
            coarse = index.find(lv_all[rest] - 1, pos[rest] >> 1)
            hit = coarse >= 0
            r, m = rest[hit], coarse[hit]
            interior = is_fluid[m]
            add(fluid_idx[r[interior]], m[interior], Patch.INTERIOR, axis, sign,
                face_area[r[interior]], face_center[r[interior]])
            add(fluid_idx[r[~interior]], np.full(int((~interior).sum()), -1), Patch.BODY, axis, sign,
                face_area[r[~interior]], face_center[r[~interior]])
            rest = rest[~hit]

            # 4. Finer neighbours: fluid children own the face, the rest are walls
            if len(rest) == 0:
                continue
            child_size = size_all[rest] / 2.0
            for o1 in (0, 1):
                for o2 in (0, 1):
                    child = 2 * pos[rest]
                    child[:, axis] += 0 if sign > 0 else 1
                    child[:, lat[0]] += o1
                    child[:, lat[1]] += o2
                    found = index.find(lv_all[rest] + 1, child)
                    if np.any(found < 0):
                        raise MeshError("octree is not 2:1 balanced")
                    wall = ~is_fluid[found]
                    center = mesh.box.lower + (child + 0.5) * child_size
                    center[:, axis] -= 0.5 * sign * child_size[:, axis]
                    add(fluid_idx[rest[wall]], np.full(int(wall.sum()), -1), Patch.BODY, axis, sign,
                        (child_size[:, lat[0]] * child_size[:, lat[1]])[wall], center[wall])

    return FaceSet(
        owner=np.concatenate(owners).astype(np.int64),
        neighbour=np.concatenate(neighbours).astype(np.int64),
        patch=np.concatenate(patches),
        axis=np.concatenate(axes),
        sign=np.concatenate(signs),
        area=np.concatenate(areas),
        center=np.concatenate(centers).reshape(-1, 3),
    )


# ============ Block Mesh ============


def block_mesh(box: DomainBox, counts: tuple[int, int, int]) -> HexMesh:
    """
    Uniform background mesh of counts[0] x counts[1] x counts[2] hexahedra.

    Example:
        mesh = block_mesh(DomainBox((0, 0, 0), (1, 1, 1)), (10, 10, 10))
        mesh.cell_count  # 1000
        mesh.faces.count(Patch.INLET)  # 100
    """
    if any(c < 1 for c in counts):
        raise MeshError(f"base cell counts must be >= 1, got {counts}")
    ijk = np.indices(counts, dtype=np.int64).reshape(3, -1).T
    n = len(ijk)
    return HexMesh(
        box=box,
        base_cells=tuple(int(c) for c in counts),
        level=np.zeros(n, dtype=np.int64),
        ijk=ijk,
        state=np.full(n, CellState.FLUID, dtype=np.int8),
        cut=np.zeros(n, dtype=bool),
    )


# ============ Point Classification ============


class _RayCaster:
    """
    Inside/outside classification by ray parity.

    The fast path casts +x rays and only tests triangles whose yz bounding
    rectangle shares the query point's bin. A ray that grazes an edge or a
    vertex, or a point lying on the surface, is retried along jittered
    general directions.
    """

    def __init__(self, mesh: TriMesh) -> None:
        if not mesh.is_watertight():
            raise NonWatertightInputError("point classification needs a watertight surface")
        self.tris = mesh.vertices[mesh.triangles]
        self.lo, self.hi = mesh.bbox()
        scale = float(np.max(self.hi - self.lo)) or 1.0
        self.tol_area = 1e-12 * scale**2
        self.tol_len = 1e-10 * scale

        # yz bins over the bounding box
        t = len(self.tris)
        self.bins = int(np.clip(np.sqrt(t) / 2, 1, 64))
        self.width = np.maximum((self.hi[1:] - self.lo[1:]) / self.bins, 1e-300)
        b_lo = self._bin(self.tris[:, :, 1:].min(axis=1))
        b_hi = self._bin(self.tris[:, :, 1:].max(axis=1))
        span = b_hi - b_lo + 1
        counts = span[:, 0] * span[:, 1]
        tri_id = np.repeat(np.arange(t), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        by = b_lo[tri_id, 0] + local // span[tri_id, 1]
        bz = b_lo[tri_id, 1] + local % span[tri_id, 1]
        bin_id = by * self.bins + bz
        order = np.argsort(bin_id, kind="stable")
        self.bin_tris = tri_id[order]
        self.bin_start = np.searchsorted(bin_id[order], np.arange(self.bins * self.bins + 1))

    def _bin(self, yz: np.ndarray) -> np.ndarray:
        return np.clip(np.floor((yz - self.lo[1:]) / self.width).astype(np.int64), 0, self.bins - 1)

    def inside(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        result = np.zeros(len(points), dtype=bool)
        candidate = np.flatnonzero(np.all((points > self.lo) & (points < self.hi), axis=1))
        if len(candidate) == 0:
            return result

        pts = points[candidate]
        bins = self._bin(pts[:, 1:])
        bin_id = bins[:, 0] * self.bins + bins[:, 1]
        for b in np.unique(bin_id):
            sel = np.flatnonzero(bin_id == b)
            tris = self.bin_tris[self.bin_start[b] : self.bin_start[b + 1]]
            crossings, ambiguous = self._cast_x(pts[sel], self.tris[tris])
            result[candidate[sel]] = crossings % 2 == 1
            for k in np.flatnonzero(ambiguous):
                result[candidate[sel[k]]] = self._cast_jittered(pts[sel[k]])
        return result

    def _cast_x(self, p: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if len(tri) == 0:
            return np.zeros(len(p), dtype=np.int64), np.zeros(len(p), dtype=bool)

        def cross2(u, v):
            return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        q = p[:, None, 1:]
        area = cross2(b[:, 1:] - a[:, 1:], c[:, 1:] - a[:, 1:])
        valid = np.abs(area) > self.tol_area
        safe = np.where(valid, area, 1.0)
        w_c = cross2(b[:, 1:] - a[:, 1:], q - a[:, 1:]) / safe
        w_a = cross2(c[:, 1:] - b[:, 1:], q - b[:, 1:]) / safe
        w_b = cross2(a[:, 1:] - c[:, 1:], q - c[:, 1:]) / safe
        w = np.stack([w_a, w_b, w_c])
        x = w_a * a[:, 0] + w_b * b[:, 0] + w_c * c[:, 0]

        eps = 1e-12
        strictly = valid & np.all(w > eps, axis=0)
        touching = valid & np.all(w > -eps, axis=0) & ~strictly
        ahead = x > p[:, None, 0] + self.tol_len
        on_surface = strictly & (np.abs(x - p[:, None, 0]) <= self.tol_len)
        crossings = np.count_nonzero(strictly & ahead, axis=1)
        ambiguous = np.any(touching & (x > p[:, None, 0] - self.tol_len), axis=1) | np.any(on_surface, axis=1)
        return crossings, ambiguous

    def _cast_jittered(self, p: np.ndarray, attempts: int = 16) -> bool:
        a, b, c = self.tris[:, 0], self.tris[:, 1], self.tris[:, 2]
        e1, e2 = b - a, c - a
        s = p - a
        rng = np.random.default_rng(_JITTER_SEED)
        eps = 1e-9
        parity = False
        for _ in range(attempts):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            pvec = np.cross(d, e2)
            det = np.einsum("ij,ij->i", e1, pvec)
            valid = np.abs(det) > self.tol_area * 1e-3
            inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
            u = np.einsum("ij,ij->i", s, pvec) * inv
            qvec = np.cross(s, e1)
            v = (qvec @ d) * inv
            t = np.einsum("ij,ij->i", e2, qvec) * inv
            hit = valid & (u > eps) & (v > eps) & (u + v < 1 - eps) & (t > self.tol_len)
            near = valid & (u > -eps) & (v > -eps) & (u + v < 1 + eps) & (t > -self.tol_len) & ~hit
            parity = bool(np.count_nonzero(hit) % 2)
            if not near.any():
                return parity
        return parity


def points_inside(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """
    Classify many points against a watertight surface.

    Points outside the surface's bounding box are rejected without casting.

    Raises:
        NonWatertightInputError: If the surface is not watertight
    """
    return _RayCaster(mesh).inside(points)


def point_inside(mesh: TriMesh, p: np.ndarray) -> bool:
    """Single-point form of points_inside."""
    return bool(points_inside(mesh, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def _classify(caster: _RayCaster, points: np.ndarray, workers: int) -> np.ndarray:
    """Chunked classification; chunk results are merged in submission order."""
    if workers <= 1 or len(points) < 4096:
        return caster.inside(points)
    chunks = np.array_split(points, workers * 4)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(caster.inside, chunks))
    return np.concatenate(parts)


# ============ Castellation ============


def _cut_leaves(mesh_box: DomainBox, base: np.ndarray, body: TriMesh, level: np.ndarray, ijk: np.ndarray,
                candidates: np.ndarray) -> np.ndarray:
    """
    Mark candidate leaves whose box overlaps the body surface.

    Overlap is the triangle's bounding box plus its supporting plane crossing
    the cell, which may over-mark cells near a triangle's corners.
    """
    cut = np.zeros(len(level), dtype=bool)
    if body.triangle_count == 0 or not candidates.any():
        return cut

    index = _LeafIndex(base, level, ijk)
    tris = body.vertices[body.triangles]
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    base_size = mesh_box.size / base

    for lvl in np.unique(level[candidates]):
        h = base_size / (1 << int(lvl))
        dims = base << int(lvl)
        lo = np.clip(np.floor((tris.min(axis=1) - mesh_box.lower) / h).astype(np.int64), 0, dims - 1)
        hi = np.clip(np.floor((tris.max(axis=1) - mesh_box.lower) / h).astype(np.int64), 0, dims - 1)
        span = hi - lo + 1

        for start in range(0, len(tris), 4096):
            sl = slice(start, start + 4096)
            counts = np.prod(span[sl], axis=1)
            tri_id = np.repeat(np.arange(start, start + len(counts)), counts)
            local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            sy, sz = span[tri_id, 1], span[tri_id, 2]
            cell = lo[tri_id] + np.stack([local // (sy * sz), (local // sz) % sy, local % sz], axis=1)

            center = mesh_box.lower + (cell + 0.5) * h
            n = normals[tri_id]
            distance = np.abs(np.einsum("ij,ij->i", n, center - tris[tri_id, 0]))
            radius = 0.5 * np.abs(n) @ h
            touching = distance <= radius

            leaf = index.find(np.full(int(touching.sum()), lvl), cell[touching])
            leaf = leaf[leaf >= 0]
            cut[leaf[candidates[leaf]]] = True
    return cut


def _split(level: np.ndarray, ijk: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kids = (2 * ijk[mask])[:, None, :] + _CHILD_OFFSETS[None, :, :]
    return (
        np.concatenate([level[~mask], np.repeat(level[mask] + 1, 8)]),
        np.concatenate([ijk[~mask], kids.reshape(-1, 3)]),
    )


def _balance(base: np.ndarray, level: np.ndarray, ijk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split leaves until face-adjacent leaves differ by at most one level."""
    while True:
        index = _LeafIndex(base, level, ijk)
        marks = np.zeros(len(level), dtype=bool)
        for axis in range(3):
            for sign in (-1, 1):
                pos = ijk.copy()
                pos[:, axis] += sign
                for k in range(2, index.max_level + 1):
                    deep = np.flatnonzero(level >= k)
                    found = index.find(level[deep] - k, pos[deep] >> k)
                    marks[found[found >= 0]] = True
        if not marks.any():
            return level, ijk
        level, ijk = _split(level, ijk, marks)


def _inlet_region(mesh: HexMesh) -> np.ndarray:
    """
    State array keeping only the largest fluid component that touches the inlet.

    Raises:
        MeshFailure: If no component touches the inlet, or two tie for largest
    """
    faces = mesh.faces
    inner = faces.patch == Patch.INTERIOR
    n = len(mesh.level)
    graph = coo_matrix(
        (np.ones(int(inner.sum())), (faces.owner[inner], faces.neighbour[inner])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)

    fluid = mesh.fluid
    inlet_leaves = faces.owner[faces.patch == Patch.INLET]
    touching = np.unique(labels[inlet_leaves])
    if len(touching) == 0:
        raise MeshFailure(MeshStage.CASTELLATION.value, "no_inlet_region", {"fluid_cells": int(fluid.sum())})

    sizes = np.array([np.count_nonzero(fluid & (labels == t)) for t in touching])
    best = sizes.max()
    if np.count_nonzero(sizes == best) > 1:
        raise MeshFailure(
            MeshStage.CASTELLATION.value, "ambiguous_fluid_region", {"regions": len(sizes), "cells": int(best)}
        )
    keep = labels == touching[int(np.argmax(sizes))]

    state = mesh.state.copy()
    state[fluid & ~keep] = CellState.DISCONNECTED
    return state


def castellate(background: HexMesh, body: TriMesh, levels: int, workers: int = 1) -> HexMesh:
    """
    Castellate a background mesh against a body surface.

    Args:
        background: Uniform mesh from block_mesh
        body: Watertight surface strictly inside the domain (mm)
        levels: Octree refinement levels applied to surface-cut cells
        workers: Threads for centroid classification (results do not depend on it)

    Returns:
        A new HexMesh; the input is returned unchanged when the body is empty

    Raises:
        MeshFailure: Castellation stage, when the body covers fewer than 8
                     base-cell centroids or the fluid region is ambiguous
        NonWatertightInputError: If the body is not watertight
    """
    if body.triangle_count == 0:
        return background

    lo, hi = body.bbox()
    if not background.box.strictly_contains(lo, hi):
        raise MeshError("body is not strictly inside the domain box")

    caster = _RayCaster(body)
    base = background.base

    # 1. Resolution check on the background cells
    inside_base = _classify(caster, background.centroids, workers)
    if np.count_nonzero(inside_base) < MIN_INSIDE_BASE_CELLS:
        raise MeshFailure(
            MeshStage.CASTELLATION.value,
            "under_resolved",
            {"inside_base_cells": int(np.count_nonzero(inside_base)), "required": MIN_INSIDE_BASE_CELLS},
        )

    # 2. Refine cut cells level by level, keeping 2:1 balance
    level, ijk = background.level.copy(), background.ijk.copy()
    for lvl in range(levels):
        cut = _cut_leaves(background.box, base, body, level, ijk, level == lvl)
        if not cut.any():
            break
        level, ijk = _split(level, ijk, cut)
        level, ijk = _balance(base, level, ijk)
        logger.debug(f"refined level {lvl}: {int(cut.sum())} cells split, {len(level)} leaves")

    level, ijk = _canonical(base, level, ijk)
    cut = _cut_leaves(background.box, base, body, level, ijk, np.ones(len(level), dtype=bool))

    # 3. Drop cells whose centroid lies inside the body
    provisional = HexMesh(background.box, background.base_cells, level, ijk,
                          np.full(len(level), CellState.FLUID, dtype=np.int8), cut)
    inside = _classify(caster, provisional.centroids, workers)
    state = np.where(inside, CellState.INSIDE, CellState.FLUID).astype(np.int8)

    # 4. Keep the single inlet-connected fluid region
    mesh = provisional.with_state(state)
    mesh = mesh.with_state(_inlet_region(mesh))

    logger.info(
        f"castellated: leaves={len(level)} fluid={mesh.cell_count} inside={int(inside.sum())} "
        f"disconnected={int(np.count_nonzero(mesh.state == CellState.DISCONNECTED))} cut={int(cut.sum())}"
    )
    return mesh


# ============ Quality ============


class MeshQualityReport(BaseModel):
    min_aspect_ratio: float
    max_aspect_ratio: float
    max_non_orthogonality: float  # degrees
    max_skewness: float
    aspect_violations: int
    non_orthogonality_violations: int
    skewness_violations: int
    violating_cells: int
    flagged_for_removal: list[int]  # leaf indices adjacent to the body


def quality_check(mesh: HexMesh, thresholds: QualitySpec | None = None) -> MeshQualityReport:
    """
    Per-cell quality metrics over the fluid cells.

    Non-orthogonality is the angle between a face normal and the line joining
    the two cell centroids; skewness is the distance from the face center to
    where that line crosses the face plane, relative to the line's length.
    Violating cells with a body face are flagged for removal.
    """
    thresholds = thresholds or QualitySpec()
    fluid = np.flatnonzero(mesh.fluid)
    n = len(mesh.level)

    sizes = mesh.sizes
    aspect = np.zeros(n)
    aspect[fluid] = sizes[fluid].max(axis=1) / sizes[fluid].min(axis=1)

    faces = mesh.faces
    inner = np.flatnonzero(faces.patch == Patch.INTERIOR)
    centroids = mesh.centroids
    owner, neighbour = faces.owner[inner], faces.neighbour[inner]
    d = centroids[neighbour] - centroids[owner]
    normal = np.zeros_like(d)
    normal[np.arange(len(inner)), faces.axis[inner]] = faces.sign[inner]
    along = np.einsum("ij,ij->i", d, normal)
    length = np.linalg.norm(d, axis=1)
    angle = np.degrees(np.arccos(np.clip(along / length, -1.0, 1.0)))
    offset = np.einsum("ij,ij->i", faces.center[inner] - centroids[owner], normal)
    crossing = centroids[owner] + d * (offset / along)[:, None]
    skew = np.linalg.norm(faces.center[inner] - crossing, axis=1) / length

    non_ortho = np.zeros(n)
    skewness = np.zeros(n)
    for cells in (owner, neighbour):
        np.maximum.at(non_ortho, cells, angle)
        np.maximum.at(skewness, cells, skew)

    bad_aspect = aspect > thresholds.max_aspect_ratio
    bad_ortho = non_ortho > thresholds.max_non_orthogonality
    bad_skew = skewness > thresholds.max_skewness
    bad = bad_aspect | bad_ortho | bad_skew

    at_body = np.zeros(n, dtype=bool)
    at_body[faces.owner[faces.patch == Patch.BODY]] = True

    return MeshQualityReport(
        min_aspect_ratio=float(aspect[fluid].min()) if len(fluid) else 0.0,
        max_aspect_ratio=float(aspect[fluid].max()) if len(fluid) else 0.0,
        max_non_orthogonality=float(non_ortho.max()) if n else 0.0,
        max_skewness=float(skewness.max()) if n else 0.0,
        aspect_violations=int(np.count_nonzero(bad_aspect)),
        non_orthogonality_violations=int(np.count_nonzero(bad_ortho)),
        skewness_violations=int(np.count_nonzero(bad_skew)),
        violating_cells=int(np.count_nonzero(bad)),
        flagged_for_removal=np.flatnonzero(bad & at_body).tolist(),
    )


def remove_flagged(mesh: HexMesh, report: MeshQualityReport) -> HexMesh:
    """Remove quality-flagged cells and re-select the inlet-connected region."""
    if not report.flagged_for_removal:
        return mesh
    state = mesh.state.copy()
    state[report.flagged_for_removal] = CellState.QUALITY
    trimmed = mesh.with_state(state)
    return trimmed.with_state(_inlet_region(trimmed))


# ============ Auto Mesh ============


class MeshAttempt(BaseModel):
    attempt: int
    base_cells: tuple[int, int, int]
    outcome: str  # "ok" or "failed"
    stage: str | None = None
    diagnostic: str | None = None
    counts: dict[str, int] = {}
    cell_count: int = 0


def auto_mesh(body: TriMesh, spec: MeshSpec, box: DomainBox | None = None) -> tuple[HexMesh, list[MeshAttempt]]:
    """
    Mesh a body, doubling the base cell counts after every failed attempt.

    Args:
        body: Watertight body surface (mm)
        spec: Mesh settings; spec.max_retries bounds the number of attempts
        box: Domain override; derived from the body and spec when omitted

    Returns:
        (mesh, attempt log) of the first attempt that passes castellation and quality

    Raises:
        AutoMeshExhaustedError: After max_retries failed attempts (carries the log)
    """
    box = box or domain_box(body, spec)
    attempts: list[MeshAttempt] = []
    counts = tuple(int(c) for c in spec.base_cells)

    for attempt in range(1, spec.max_retries + 1):
        try:
            mesh = castellate(block_mesh(box, counts), body, spec.surface_refinement_levels, spec.workers)

            report = quality_check(mesh, spec.quality)
            if report.violating_cells:
                mesh = remove_flagged(mesh, report)
                report = quality_check(mesh, spec.quality)
                if report.violating_cells:
                    raise MeshFailure(
                        MeshStage.QUALITY.value,
                        "quality_violations",
                        {"violating_cells": report.violating_cells},
                    )

            attempts.append(MeshAttempt(attempt=attempt, base_cells=counts, outcome="ok", cell_count=mesh.cell_count))
            logger.info(f"auto_mesh attempt {attempt} base_cells={counts}: ok, {mesh.cell_count} cells")
            return mesh, attempts

        except MeshFailure as e:
            attempts.append(
                MeshAttempt(
                    attempt=attempt,
                    base_cells=counts,
                    outcome="failed",
                    stage=e.stage,
                    diagnostic=e.diagnostic,
                    counts=e.counts,
                )
            )
            logger.warning(f"auto_mesh attempt {attempt} base_cells={counts}: {e}")
            counts = tuple(2 * c for c in counts)

    raise AutoMeshExhaustedError(attempts)


# ============ Voxelization ============


@dataclass(frozen=True)
class VoxelGrid:
    solid: np.ndarray  # (nx, ny, nz) bool
    spacing: float  # mm, cubic voxels
    origin: np.ndarray  # (3,) mm, lower corner of voxel (0, 0, 0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.solid.shape


def voxelize(mesh: HexMesh, level: int = 0) -> VoxelGrid:
    """
    Rasterize the mesh onto the uniform grid of one octree level.

    Leaves coarser than the level fill whole blocks; finer leaves vote by
    volume, and a voxel is solid when at least half of it is non-fluid.
    """
    size = mesh.base_size / (1 << level)
    if not np.allclose(size, size[0], rtol=1e-9):
        raise MeshError(f"lattice needs cubic cells, got {size.tolist()} mm")
    dims = mesh.base << level
    solid_fraction = np.zeros(tuple(dims), dtype=np.float64)
    non_fluid = ~mesh.fluid

    coarse = np.flatnonzero(mesh.level <= level)
    for lv in np.unique(mesh.level[coarse]):
        sel = coarse[mesh.level[coarse] == lv]
        block = 1 << int(level - lv)
        offsets = np.indices((block, block, block)).reshape(3, -1).T
        vox = (mesh.ijk[sel] * block)[:, None, :] + offsets[None, :, :]
        values = np.repeat(non_fluid[sel].astype(np.float64), len(offsets))
        flat = vox.reshape(-1, 3)
        solid_fraction[flat[:, 0], flat[:, 1], flat[:, 2]] = values

    fine = np.flatnonzero(mesh.level > level)
    if len(fine):
        shift = mesh.level[fine] - level
        vox = mesh.ijk[fine] >> shift[:, None]
        weight = non_fluid[fine] / (8.0**shift)
        np.add.at(solid_fraction, (vox[:, 0], vox[:, 1], vox[:, 2]), weight)

    return VoxelGrid(solid=solid_fraction >= 0.5, spacing=float(size[0]), origin=mesh.box.lower)


# ============ Export ============


def export_mesh_vtk(mesh: HexMesh, path: str | Path) -> Path:
    """
    Write the fluid cells as a VTK legacy ASCII unstructured grid.

    Cell data: "level" (octree level) and "patches" (bitmask of the patches
    the cell touches: inlet 1, outlet 2, symmetry 4, body 8).
    """
    path = Path(path)
    cells = np.flatnonzero(mesh.fluid)
    top = mesh.max_level

    # Integer corner coordinates on the finest lattice
    scale = (1 << (top - mesh.level[cells]))[:, None, None]
    corners = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64
    )
    lattice = (mesh.ijk[cells][:, None, :] + corners[None, :, :]) * scale
    points, connectivity = np.unique(lattice.reshape(-1, 3), axis=0, return_inverse=True)
    connectivity = connectivity.reshape(-1, 8)
    coords = mesh.box.lower + points * (mesh.base_size / (1 << top))

    faces = mesh.faces
    bits = np.zeros(len(mesh.level), dtype=np.int64)
    for patch in (Patch.INLET, Patch.OUTLET, Patch.SYMMETRY, Patch.BODY):
        owners = faces.owner[faces.patch == patch]
        bits[owners] |= 1 << (int(patch) - 1)

    lines = ["# vtk DataFile Version 3.0", "anvil castellated mesh (mm)", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(coords)} double")
    lines.extend(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in coords)
    lines.append(f"CELLS {len(cells)} {9 * len(cells)}")
    lines.extend("8 " + " ".join(str(v) for v in row) for row in connectivity)
    lines.append(f"CELL_TYPES {len(cells)}")
    lines.extend("12" for _ in range(len(cells)))
    lines.append(f"CELL_DATA {len(cells)}")
    lines.append("SCALARS level int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(v)) for v in mesh.level[cells])
    lines.append("SCALARS patches int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(v)) for v in bits[cells])

    try:
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path
