"""
app/services/stl_io.py - STL Reading and Writing

STL is the exchange format between geometry and meshing. Lengths are always
millimeters.

Binary layout (little-endian):
    80-byte header | uint32 facet count | count x 50-byte facets
    facet = float32 normal[3] | float32 vertex[3][3] | uint16 attribute

Format detection: a file whose size is exactly 84 + 50 * count is binary,
even when its header starts with "solid" (many exporters do that). Otherwise
a leading "solid" means ASCII.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from app.core.errors import FacetCountMismatchError, IoFailureError, TruncatedFileError, UnparsableAsciiError
from app.services.surface import WELD_TOL, TriMesh

HEADER_SIZE = 80
FACET_SIZE = 50

_FACET = np.dtype([("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attribute", "<u2")])


class StlFormat(str, Enum):
    BINARY = "Binary"
    ASCII = "Ascii"


@dataclass(frozen=True)
class StlDiagnostics:
    format: StlFormat
    name: str  # ASCII solid name or stripped binary header
    triangle_count: int
    watertight: bool
    bbox_min: tuple[float, float, float]  # mm
    bbox_max: tuple[float, float, float]  # mm


# ============ Writing ============


def write_stl(
    mesh: TriMesh,
    fmt: StlFormat = StlFormat.BINARY,
    name: str = "anvil",
    header: bytes | None = None,
) -> bytes:
    """
    Serialize a mesh to STL.

    Args:
        mesh: Triangle mesh in mm (need not be watertight)
        fmt: Binary or Ascii
        name: Solid name for ASCII output
        header: Raw binary header (truncated or zero-padded to 80 bytes)

    Returns:
        The file contents
    """
    corners = mesh.vertices[mesh.triangles]
    normals = mesh.normals

    if fmt == StlFormat.ASCII:
        lines = [f"solid {name}"]
        for n, tri in zip(normals, corners):
            lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
            lines.append("    outer loop")
            for v in tri:
                lines.append(f"      vertex {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        return ("\n".join(lines) + "\n").encode("ascii")

    head = (header if header is not None else f"{name} binary STL (mm)".encode("ascii"))[:HEADER_SIZE]
    facets = np.zeros(len(corners), dtype=_FACET)
    facets["normal"] = normals
    facets["vertices"] = corners
    return head.ljust(HEADER_SIZE, b"\0") + np.uint32(len(facets)).tobytes() + facets.tobytes()


def save_stl(mesh: TriMesh, path: str | Path, fmt: StlFormat = StlFormat.BINARY) -> Path:
    path = Path(path)
    try:
        path.write_bytes(write_stl(mesh, fmt))
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path


# ============ Reading ============


def _is_binary(data: bytes) -> bool:
    if len(data) < HEADER_SIZE + 4:
        return False
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=HEADER_SIZE)[0])
    return len(data) == HEADER_SIZE + 4 + FACET_SIZE * count


_TEXT_BYTES = bytes(range(32, 127)) + b"\t\n\r"


def _looks_binary(data: bytes) -> bool:
    """A whole number of facets after the preamble, and bytes no ASCII STL contains."""
    if len(data) < HEADER_SIZE + 4 or (len(data) - HEADER_SIZE - 4) % FACET_SIZE:
        return False
    return bool(data[HEADER_SIZE:].translate(None, _TEXT_BYTES))


def _parse_binary(data: bytes) -> tuple[np.ndarray, str]:
    if len(data) < HEADER_SIZE + 4:
        raise TruncatedFileError(f"{len(data)} bytes is shorter than the {HEADER_SIZE + 4}-byte binary preamble")

    declared = int(np.frombuffer(data, dtype="<u4", count=1, offset=HEADER_SIZE)[0])
    payload = len(data) - HEADER_SIZE - 4
    if payload % FACET_SIZE:
        raise TruncatedFileError(f"payload of {payload} bytes is not a whole number of facets")
    if payload // FACET_SIZE != declared:
        raise FacetCountMismatchError(declared, payload // FACET_SIZE)

    facets = np.frombuffer(data, dtype=_FACET, count=declared, offset=HEADER_SIZE + 4)
    name = data[:HEADER_SIZE].rstrip(b"\0 ").decode("ascii", errors="replace")
    return facets["vertices"].astype(np.float64), name


def _parse_ascii(data: bytes) -> tuple[np.ndarray, str]:
    lines = data.decode("ascii", errors="replace").splitlines()
    it = ((i + 1, line.split()) for i, line in enumerate(lines))
    it = ((num, tokens) for num, tokens in it if tokens)

    def expect(words: list[str]) -> None:
        try:
            num, tokens = next(it)
        except StopIteration:
            raise TruncatedFileError(f"file ends before '{' '.join(words)}'") from None
        if tokens != words:
            raise UnparsableAsciiError(num, " ".join(tokens))

    def floats(num: int, tokens: list[str]) -> list[float]:
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise UnparsableAsciiError(num, " ".join(tokens)) from None
        if len(values) != 3 or not all(np.isfinite(values)):
            raise UnparsableAsciiError(num, " ".join(tokens))
        return values

    first = next(it, None)
    if first is None or first[1][0] != "solid":
        raise UnparsableAsciiError(1, "expected 'solid'")
    name = " ".join(first[1][1:])

    triangles = []
    for num, tokens in it:
        match tokens:
            case ["endsolid", *_]:
                break
            case ["facet", "normal", *normal]:
                floats(num, normal)
                expect(["outer", "loop"])
                tri = []
                for _ in range(3):
                    try:
                        vnum, vtokens = next(it)
                    except StopIteration:
                        raise TruncatedFileError("file ends inside a facet") from None
                    if vtokens[0] != "vertex":
                        raise UnparsableAsciiError(vnum, " ".join(vtokens))
                    tri.append(floats(vnum, vtokens[1:]))
                expect(["endloop"])
                expect(["endfacet"])
                triangles.append(tri)
            case _:
                raise UnparsableAsciiError(num, " ".join(tokens))
    else:
        raise TruncatedFileError("missing 'endsolid'")

    return np.array(triangles, dtype=np.float64).reshape(-1, 3, 3), name


def read_stl(data: bytes, weld_tol: float = WELD_TOL) -> tuple[TriMesh, StlDiagnostics]:
    """
    Parse an STL file and weld coincident vertices.

    Args:
        data: Raw file contents
        weld_tol: Vertex merge distance (mm)

    Returns:
        (mesh, diagnostics)

    Raises:
        TruncatedFileError: If the file ends early
        FacetCountMismatchError: If the binary count field disagrees with the payload
        UnparsableAsciiError: If an ASCII line does not fit the grammar
    """
    if _is_binary(data):
        corners, name, fmt = *_parse_binary(data), StlFormat.BINARY
    elif data.lstrip()[:5] == b"solid" and not _looks_binary(data):
        corners, name, fmt = *_parse_ascii(data), StlFormat.ASCII
    else:
        corners, name, fmt = *_parse_binary(data), StlFormat.BINARY

    mesh = TriMesh.from_soup(corners, weld_tol) if len(corners) else TriMesh.empty()
    lo, hi = mesh.bbox()
    diagnostics = StlDiagnostics(
        format=fmt,
        name=name,
        triangle_count=mesh.triangle_count,
        watertight=mesh.is_watertight(),
        bbox_min=tuple(float(v) for v in lo),
        bbox_max=tuple(float(v) for v in hi),
    )
    return mesh, diagnostics


def load_stl(path: str | Path, weld_tol: float = WELD_TOL) -> tuple[TriMesh, StlDiagnostics]:
    """
    Read an STL file from disk.

    Raises:
        IoFailureError: If the file does not exist or cannot be read
    """
    path = Path(path)
    if not path.is_file():
        raise IoFailureError(f"STL file not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    return read_stl(data, weld_tol)
