"""
app/services/surface.py - Triangle Surface Mesh

TriMesh is the exchange object between geometry, STL files and the mesher.
Vertices are in millimeters; triangles index into the vertex array and are
wound counter-clockwise when seen from outside (right-hand normal points
out of the body).

All methods are pure: transforms return new meshes.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

# Default vertex-welding tolerance (mm)
WELD_TOL = 1e-6


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (N, 3) float64, mm
    triangles: np.ndarray  # (M, 3) int64

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))

    # ============ Construction ============

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def from_soup(cls, corners: np.ndarray, tol: float = WELD_TOL) -> "TriMesh":
        """
        Build an indexed mesh from a triangle soup.

        Args:
            corners: (M, 3, 3) array, corners[i, k] is the k-th corner of triangle i
            tol: Corners closer than this are merged into one vertex
        """
        corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
        raw = cls(corners.reshape(-1, 3), np.arange(len(corners) * 3).reshape(-1, 3))
        return raw.weld(tol)

    # ============ Topology ============

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def _edge_counts(self) -> np.ndarray:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def edge_count(self) -> int:
        """Number of distinct undirected edges."""
        return len(self._edge_counts()) if len(self.triangles) else 0

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if len(self.triangles) == 0:
            return False
        return bool(np.all(self._edge_counts() == 2))

    def is_consistently_oriented(self) -> bool:
        """Each directed edge appears once, so neighbours traverse shared edges in opposite directions."""
        if not self.is_watertight():
            return False
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        _, counts = np.unique(directed, axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def euler_characteristic(self) -> int:
        """V - E + F over the vertices referenced by triangles."""
        used = len(np.unique(self.triangles)) if len(self.triangles) else 0
        return used - self.edge_count() + len(self.triangles)

    # ============ Geometry ============

    def _corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    def area_vectors(self) -> np.ndarray:
        """Per-triangle normal scaled by area (mm^2)."""
        a, b, c = self._corners()
        return 0.5 * np.cross(b - a, c - a)

    @property
    def normals(self) -> np.ndarray:
        """Unit normals; zero for degenerate triangles."""
        vec = self.area_vectors()
        norm = np.linalg.norm(vec, axis=1, keepdims=True)
        return np.divide(vec, norm, out=np.zeros_like(vec), where=norm > 0)

    def signed_volume(self) -> float:
        """Enclosed volume (mm^3); positive for outward orientation."""
        if len(self.triangles) == 0:
            return 0.0
        a, b, c = self._corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def surface_area(self) -> float:
        return float(np.linalg.norm(self.area_vectors(), axis=1).sum())

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """(min corner, max corner) in mm."""
        if len(self.vertices) == 0:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def frontal_area(self, axis: int = 0) -> float:
        """
        Area projected onto the plane normal to `axis` (mm^2).

        Computed as half the summed absolute projected triangle areas, which is
        the exact silhouette area for closed bodies that every ray along
        `axis` crosses at most twice.
        """
        return float(0.5 * np.abs(self.area_vectors()[:, axis]).sum())

    # ============ Transforms ============

    def translated(self, offset: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles)

    def scaled(self, factor: float) -> "TriMesh":
        return TriMesh(self.vertices * factor, self.triangles)

    def mirrored(self, axis: int) -> "TriMesh":
        """Reflect across the plane coordinate[axis] = 0; winding is flipped to stay outward."""
        vertices = self.vertices.copy()
        vertices[:, axis] = -vertices[:, axis]
        return TriMesh(vertices, self.triangles[:, ::-1])

    def weld(self, tol: float = WELD_TOL) -> "TriMesh":
        """
        Merge vertices closer than tol and drop triangles that collapse.

        Each cluster keeps the coordinates of its lowest-index vertex, so the
        result does not depend on neighbour-search order.
        """
        n = len(self.vertices)
        if n == 0:
            return self

        # 1. Clusters of coincident vertices
        pairs = cKDTree(self.vertices).query_pairs(r=tol, output_type="ndarray")
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        n_clusters, labels = connected_components(graph, directed=False)
        representative = np.full(n_clusters, n, dtype=np.int64)
        np.minimum.at(representative, labels, np.arange(n))

        # 2. Remap and drop collapsed triangles
        mapped = representative[labels][self.triangles]
        keep = (mapped[:, 0] != mapped[:, 1]) & (mapped[:, 1] != mapped[:, 2]) & (mapped[:, 0] != mapped[:, 2])
        mapped = mapped[keep]

        # 3. Compact the vertex array
        used, inverse = np.unique(mapped.ravel(), return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3))
