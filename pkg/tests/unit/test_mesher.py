"""
tests/unit/test_mesher.py - Castellated Hex Mesher Tests

Background blocks, point classification, castellation against a sphere,
the auto-mesh retry loop, voxelization and VTK export.
"""

import math
from unittest.mock import patch

import numpy as np
import pytest

from app.core.errors import AutoMeshExhaustedError, MeshError, MeshFailure, NonWatertightInputError
from app.core.run_config import DomainScale, MeshSpec, QualitySpec, SeedDesign
from app.services.geometry import geometry_for
from app.services.mesher import (
    CellState,
    DomainBox,
    HexMesh,
    Patch,
    _RayCaster,
    _split,
    auto_mesh,
    block_mesh,
    castellate,
    domain_box,
    export_mesh_vtk,
    point_inside,
    points_inside,
    quality_check,
    remove_flagged,
    voxelize,
)
from app.services.parameters import builtin_table
from app.services.surface import TriMesh
from tests.conftest import sphere_surface

CUBE = DomainBox((-100.0, -100.0, -100.0), (100.0, 100.0, 100.0))


def mesh_spec(base_cells=(4, 4, 4), levels=0, retries=3) -> MeshSpec:
    return MeshSpec(
        domain_scale=DomainScale(upstream=1.0, downstream=2.0, lateral=1.0),
        base_cells=base_cells,
        surface_refinement_levels=levels,
        max_retries=retries,
    )


@pytest.fixture(scope="module")
def sphere_mesh():
    """A radius-50 mm sphere castellated on a 16^3 block with one refinement level."""
    body = sphere_surface(50.0)
    return body, castellate(block_mesh(CUBE, (16, 16, 16)), body, levels=1)


def winding_numbers(body: TriMesh, points: np.ndarray, chunk: int = 500) -> np.ndarray:
    """Generalized winding number from the summed solid angles of the triangles."""
    tris = body.vertices[body.triangles]
    out = []
    for start in range(0, len(points), chunk):
        rel = tris[None, :, :, :] - points[start : start + chunk, None, None, :]
        a, b, c = rel[:, :, 0], rel[:, :, 1], rel[:, :, 2]
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        triple = np.einsum("...i,...i->...", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("...i,...i->...", a, b) * lc
            + np.einsum("...i,...i->...", a, c) * lb
            + np.einsum("...i,...i->...", b, c) * la
        )
        out.append(2.0 * np.arctan2(triple, denom).sum(axis=1) / (4.0 * np.pi))
    return np.concatenate(out)


@pytest.fixture
def refined_block():
    """3^3 unit cubes with the centre cell split once and its (2, 2, 2) child inside a body."""
    base = block_mesh(DomainBox((0, 0, 0), (3, 3, 3)), (3, 3, 3))
    level, ijk = _split(base.level, base.ijk, np.all(base.ijk == 1, axis=1))
    state = np.full(len(level), CellState.FLUID, dtype=np.int8)
    state[(level == 1) & np.all(ijk == 2, axis=1)] = CellState.INSIDE
    return HexMesh(base.box, base.base_cells, level, ijk, state, np.zeros(len(level), dtype=bool))


def leaves(mesh: HexMesh, indices) -> set[tuple[int, tuple[int, ...]]]:
    return {(int(mesh.level[i]), tuple(int(v) for v in mesh.ijk[i])) for i in indices}


# ============ Domain and Block Mesh ============


class TestDomainBox:
    """Domain sizing around a body."""

    def test_degenerate_box(self):
        """A box with zero extent on any axis is rejected."""
        with pytest.raises(MeshError):
            DomainBox((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))

    def test_padding_and_cubic_cells(self, box):
        """Padding follows the scale factors and the base cells come out cubic."""
        body = box((0, -100, -100), (1000, 100, 100))
        spec = mesh_spec(base_cells=(16, 8, 8))
        domain = domain_box(body, spec)
        assert domain.lo[0] == pytest.approx(-1000.0)
        assert domain.size.tolist() == pytest.approx([4400.0, 2200.0, 2200.0])
        cell = domain.size / np.array(spec.base_cells)
        assert cell == pytest.approx(np.full(3, 275.0))
        assert domain.strictly_contains(*body.bbox())


class TestBlockMesh:
    """Uniform background meshes."""

    def test_counts_and_patches(self):
        """10^3 unit box: 1000 cells, 100 faces on inlet and outlet, 400 on the sides."""
        mesh = block_mesh(DomainBox((0, 0, 0), (1, 1, 1)), (10, 10, 10))
        assert mesh.cell_count == 1000
        assert mesh.patch_counts() == {"inlet": 100, "outlet": 100, "symmetry": 400, "body": 0}
        assert mesh.faces.count(Patch.INTERIOR) == 3 * 9 * 100

    def test_zero_counts(self):
        """Every axis needs at least one cell."""
        with pytest.raises(MeshError):
            block_mesh(CUBE, (0, 4, 4))

    def test_uniform_quality(self):
        """Cubes are perfectly orthogonal with unit aspect ratio."""
        report = quality_check(block_mesh(CUBE, (6, 6, 6)))
        assert report.max_aspect_ratio == pytest.approx(1.0)
        assert report.max_non_orthogonality == pytest.approx(0.0, abs=1e-9)
        assert report.violating_cells == 0

    def test_face_count(self):
        """4^3 cells: 144 interior faces plus 96 on the boundary."""
        faces = block_mesh(CUBE, (4, 4, 4)).faces
        assert len(faces.owner) == 240
        assert faces.count(Patch.INTERIOR) == 144

    def test_sliver_cell(self):
        """A single 200:1 cell is exactly one aspect violation."""
        report = quality_check(block_mesh(DomainBox((0, 0, 0), (200, 1, 1)), (1, 1, 1)))
        assert report.max_aspect_ratio == pytest.approx(200.0)
        assert report.aspect_violations == 1
        assert report.violating_cells == 1
        assert report.flagged_for_removal == []


class TestQuality:
    """Quality metrics across a 2:1 refinement interface."""

    def test_two_to_one_non_orthogonality(self, refined_block):
        """Coarse/fine faces tilt the centroid line by atan(sqrt(2) / 3), well under 45 degrees."""
        report = quality_check(refined_block)
        assert report.max_non_orthogonality == pytest.approx(math.degrees(math.atan(math.sqrt(2) / 3)))
        assert report.max_non_orthogonality <= 45.0
        assert report.violating_cells == 0

    def test_castellated_interface(self, sphere_mesh):
        """The refined sphere mesh stays within 45 degrees."""
        _, mesh = sphere_mesh
        assert quality_check(mesh).max_non_orthogonality <= 45.0

    def test_flags_only_cells_at_the_body(self, refined_block):
        """Every interface cell breaks a 20 degree limit; only those with a body face are flagged."""
        report = quality_check(refined_block, QualitySpec(max_non_orthogonality=20.0))
        assert report.non_orthogonality_violations == 13
        assert leaves(refined_block, report.flagged_for_removal) == {
            (0, (0, 1, 1)), (0, (1, 0, 1)), (0, (1, 1, 0)), (1, (3, 2, 2)), (1, (2, 3, 2)), (1, (2, 2, 3)),
        }

    def test_remove_flagged(self, refined_block):
        """Flagged cells leave the fluid; the rest stays one inlet-connected region."""
        report = quality_check(refined_block, QualitySpec(max_non_orthogonality=20.0))
        trimmed = remove_flagged(refined_block, report)
        assert np.count_nonzero(trimmed.state == CellState.QUALITY) == 6
        assert trimmed.cell_count == refined_block.cell_count - 6 == 27
        assert not np.any(trimmed.state == CellState.DISCONNECTED)

    def test_nothing_flagged_is_identity(self, refined_block):
        """Without flags the mesh comes back as is."""
        assert remove_flagged(refined_block, quality_check(refined_block)) is refined_block


# ============ Point Classification ============


class TestPointsInside:
    """Ray-parity inside tests."""

    def test_box(self, box):
        """Points inside, outside and beside a box."""
        body = box((0, 0, 0), (10, 10, 10))
        points = np.array([[5.0, 5.0, 5.0], [15.0, 5.0, 5.0], [5.0, -1.0, 5.0], [9.9, 0.1, 9.9]])
        assert points_inside(body, points).tolist() == [True, False, False, True]

    def test_ray_through_vertex(self, box):
        """A ray hitting shared edges and vertices still counts one crossing."""
        body = box((0, 0, 0), (10, 10, 10))
        assert point_inside(body, np.array([5.0, 5.0, 5.0]))
        assert point_inside(body, np.array([-5.0, 0.0, 0.0])) is False

    def test_sphere(self, sphere):
        """Centre in, far corner out."""
        body = sphere(30.0)
        assert points_inside(body, np.array([[0.0, 0.0, 0.0], [25.0, 25.0, 25.0]])).tolist() == [True, False]

    @pytest.mark.parametrize("body_name", ["sphere", "hull"])
    def test_matches_winding_number(self, body_name):
        """10^4 random points around the body agree with the solid-angle winding number."""
        if body_name == "sphere":
            body = sphere_surface(50.0)
        else:
            body = geometry_for(SeedDesign.REVOLVED_HULL, builtin_table("RevolvedHull"), n_theta=32, n_axial=32)
        lo, hi = body.bbox()
        pad = 0.1 * (hi - lo)
        points = np.random.default_rng(3).uniform(lo - pad, hi + pad, size=(10_000, 3))
        expected = winding_numbers(body, points) > 0.5
        assert 0 < expected.sum() < len(points)
        np.testing.assert_array_equal(points_inside(body, points), expected)

    def test_bbox_early_out(self, sphere):
        """Points outside the bounding box are answered without casting a ray."""
        body = sphere(30.0)
        far = np.array([[100.0, 0.0, 0.0], [0.0, -31.0, 0.0], [0.0, 0.0, 500.0]])
        with patch.object(_RayCaster, "_cast_x") as cast:
            assert points_inside(body, far).tolist() == [False, False, False]
        cast.assert_not_called()


    def test_open_surface_rejected(self, box):
        """Parity is meaningless without a closed surface."""
        body = box((0, 0, 0), (1, 1, 1))
        with pytest.raises(NonWatertightInputError):
            points_inside(TriMesh(body.vertices, body.triangles[2:]), np.zeros((1, 3)))


# ============ Castellation ============


class TestCastellation:
    """Castellating a block mesh against a sphere."""

    def test_removed_volume_close_to_sphere(self, sphere_mesh):
        """Removed cells add up to the sphere's volume within 10%."""
        _, mesh = sphere_mesh
        fine = float(mesh.base_size[0]) / (1 << mesh.max_level)
        removed = mesh.volume_units()["removed"] * fine**3
        assert removed == pytest.approx(4.0 / 3.0 * math.pi * 50.0**3, rel=0.10)

    def test_no_fluid_centroid_inside(self, sphere_mesh):
        """No kept cell has its centroid in the body."""
        body, mesh = sphere_mesh
        assert not points_inside(body, mesh.centroids[mesh.fluid]).any()

    def test_volume_accounting(self, sphere_mesh):
        """fluid + surface + removed equals the domain volume."""
        _, mesh = sphere_mesh
        units = mesh.volume_units()
        assert units["fluid"] + units["surface"] + units["removed"] == units["total"]
        assert units["total"] == 16**3 * 8

    def test_two_to_one_balance(self, sphere_mesh):
        """Face neighbours differ by at most one refinement level."""
        _, mesh = sphere_mesh
        faces = mesh.faces
        inner = faces.patch == Patch.INTERIOR
        jump = np.abs(mesh.level[faces.owner[inner]] - mesh.level[faces.neighbour[inner]])
        assert jump.max() <= 1

    def test_refined_at_surface(self, sphere_mesh):
        """Cells cut by the sphere are at the finest level; body faces exist."""
        _, mesh = sphere_mesh
        assert mesh.max_level == 1
        assert mesh.patch_counts()["body"] > 0
        assert np.all(mesh.level[mesh.cut & mesh.fluid] == 1)

    def test_single_fluid_region(self, sphere_mesh):
        """A convex body leaves no disconnected pockets."""
        _, mesh = sphere_mesh
        assert not np.any(mesh.state == CellState.DISCONNECTED)

    def test_empty_body_is_identity(self):
        """Without triangles there is nothing to cut; the background comes back unchanged."""
        background = block_mesh(CUBE, (4, 4, 4))
        assert castellate(background, TriMesh.empty(), levels=2) is background


    def test_body_outside_domain(self, box):
        """The body must sit strictly inside the box."""
        with pytest.raises(MeshError):
            castellate(block_mesh(CUBE, (4, 4, 4)), box((50, 50, 50), (150, 60, 60)), levels=0)

    def test_under_resolved(self, box):
        """Fewer than 8 base centroids inside the body is a castellation failure."""
        with pytest.raises(MeshFailure) as info:
            castellate(block_mesh(CUBE, (4, 4, 4)), box((0.1, 0.1, 0.1), (1.1, 1.1, 1.1)), levels=0)
        assert info.value.stage == "Castellation"
        assert info.value.diagnostic == "under_resolved"

    def test_workers_do_not_change_result(self, sphere):
        """Threaded classification gives the same mesh."""
        body = sphere(40.0)
        one = castellate(block_mesh(CUBE, (8, 8, 8)), body, levels=1, workers=1)
        four = castellate(block_mesh(CUBE, (8, 8, 8)), body, levels=1, workers=4)
        np.testing.assert_array_equal(one.state, four.state)
        np.testing.assert_array_equal(one.level, four.level)


# ============ Auto Mesh ============


class TestAutoMesh:
    """Retry loop with doubling base counts."""

    def test_doubles_until_resolved(self, box):
        """A 10 mm thick slab needs 32 cells per axis before centroids land inside."""
        slab = box((-40, -40, -5), (40, 40, 5))
        mesh, attempts = auto_mesh(slab, mesh_spec(base_cells=(4, 4, 4), retries=4), CUBE)
        assert [a.base_cells for a in attempts] == [(4, 4, 4), (8, 8, 8), (16, 16, 16), (32, 32, 32)]
        assert [a.outcome for a in attempts] == ["failed", "failed", "failed", "ok"]
        assert attempts[0].diagnostic == "under_resolved"
        assert mesh.base_cells == (32, 32, 32)
        assert attempts[-1].cell_count == mesh.cell_count

    def test_exhausted_after_max_retries(self, box):
        """A 1 mm cube never resolves; exactly max_retries attempts are logged."""
        tiny = box((0.1, 0.1, 0.1), (1.1, 1.1, 1.1))
        with pytest.raises(AutoMeshExhaustedError) as info:
            auto_mesh(tiny, mesh_spec(retries=3), CUBE)
        assert len(info.value.attempts) == 3
        assert all(a.outcome == "failed" for a in info.value.attempts)

    def test_first_attempt_ok(self, sphere):
        """A well-resolved body meshes on the first try."""
        _, attempts = auto_mesh(sphere(50.0), mesh_spec(base_cells=(8, 8, 8), levels=1), CUBE)
        assert len(attempts) == 1
        assert attempts[0].outcome == "ok"


# ============ Voxelization and Export ============


class TestVoxelize:
    """Rasterizing the octree onto a uniform grid."""

    def test_block_mesh_is_all_fluid(self):
        """No body, no solid voxels."""
        grid = voxelize(block_mesh(CUBE, (4, 4, 4)))
        assert grid.shape == (4, 4, 4)
        assert not grid.solid.any()
        assert grid.spacing == pytest.approx(50.0)

    def test_finer_level_multiplies_shape(self, sphere_mesh):
        """Level 1 doubles every axis and marks the sphere solid."""
        _, mesh = sphere_mesh
        grid = voxelize(mesh, level=1)
        assert grid.shape == (32, 32, 32)
        assert grid.solid[16, 16, 16]
        assert not grid.solid[0, 0, 0]
        assert grid.spacing == pytest.approx(6.25)

    def test_non_cubic_cells(self):
        """The lattice needs cubes."""
        with pytest.raises(MeshError):
            voxelize(block_mesh(DomainBox((0, 0, 0), (2, 1, 1)), (4, 4, 4)))


class TestExportVtk:
    """Legacy VTK output."""

    def test_writes_fluid_cells(self, tmp_path):
        """Header, counts and hexahedron cell type."""
        mesh = block_mesh(CUBE, (3, 2, 2))
        text = export_mesh_vtk(mesh, tmp_path / "mesh.vtk").read_text()
        assert "DATASET UNSTRUCTURED_GRID" in text
        assert "POINTS 36 double" in text
        assert "CELLS 12 108" in text
        assert "SCALARS patches int 1" in text
