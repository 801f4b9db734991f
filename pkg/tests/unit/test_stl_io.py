"""
tests/unit/test_stl_io.py - STL Reader/Writer Tests

Round-trips, format detection and malformed-file errors.
"""

import numpy as np
import pytest

from app.core.errors import FacetCountMismatchError, IoFailureError, TruncatedFileError, UnparsableAsciiError
from app.services.stl_io import StlFormat, load_stl, read_stl, save_stl, write_stl


class TestBinary:
    """Binary STL."""

    def test_round_trip_is_bit_exact(self, box):
        """write(read(write(mesh))) reproduces the same bytes."""
        data = write_stl(box((0, 0, 0), (10, 20, 30)))
        mesh, _ = read_stl(data)
        assert write_stl(mesh) == data

    def test_size(self, box):
        """84-byte preamble plus 50 bytes per facet."""
        data = write_stl(box((0, 0, 0), (1, 1, 1)))
        assert len(data) == 84 + 50 * 12

    def test_diagnostics(self, box):
        """Diagnostics report format, count, watertightness and bounds."""
        _, diag = read_stl(write_stl(box((0, 0, 0), (10, 20, 30))))
        assert diag.format == StlFormat.BINARY
        assert diag.triangle_count == 12
        assert diag.watertight
        assert diag.bbox_max == (10.0, 20.0, 30.0)

    def test_header_starting_with_solid_is_binary(self, box):
        """Exporters often write 'solid' into binary headers; the size decides."""
        data = write_stl(box((0, 0, 0), (1, 1, 1)), header=b"solid exported by CAD")
        mesh, diag = read_stl(data)
        assert diag.format == StlFormat.BINARY
        assert mesh.is_watertight()

    def test_count_mismatch(self, box):
        """A count field that disagrees with the payload is reported."""
        data = bytearray(write_stl(box((0, 0, 0), (1, 1, 1))))
        data[80:84] = np.uint32(11).tobytes()
        with pytest.raises(FacetCountMismatchError) as info:
            read_stl(bytes(data))
        assert info.value.declared == 11
        assert info.value.actual == 12

    def test_solid_header_with_count_mismatch(self, box):
        """A 'solid' header does not send a sized binary file to the ASCII parser."""
        data = bytearray(write_stl(box((0, 0, 0), (1, 1, 1)), header=b"solid exported by CAD"))
        data[80:84] = np.uint32(13).tobytes()
        with pytest.raises(FacetCountMismatchError) as info:
            read_stl(bytes(data))
        assert (info.value.declared, info.value.actual) == (13, 12)

    def test_truncated_payload(self, box):
        """A partial last facet means the file was cut."""
        data = write_stl(box((0, 0, 0), (1, 1, 1)))[:-7]
        with pytest.raises(TruncatedFileError):
            read_stl(data)

    def test_shorter_than_preamble(self):
        """Fewer than 84 bytes cannot be binary STL."""
        with pytest.raises(TruncatedFileError):
            read_stl(b"\x00" * 40)


class TestAscii:
    """ASCII STL."""

    def test_round_trip_geometry(self, box):
        """ASCII keeps the geometry and the solid name."""
        data = write_stl(box((0, 0, 0), (10, 20, 30)), StlFormat.ASCII, name="hull")
        mesh, diag = read_stl(data)
        assert diag.format == StlFormat.ASCII
        assert diag.name == "hull"
        assert mesh.signed_volume() == pytest.approx(6000.0)

    def test_binary_sized_text_stays_ascii(self, box):
        """Plain text whose length happens to fit the binary layout is still ASCII."""
        data = write_stl(box((0, 0, 0), (1, 1, 1)), StlFormat.ASCII, name="cube")
        data += b"\n" * ((84 - len(data)) % 50)
        assert (len(data) - 84) % 50 == 0
        mesh, diag = read_stl(data)
        assert diag.format == StlFormat.ASCII
        assert mesh.triangle_count == 12

    def test_bad_vertex(self):
        """A non-numeric coordinate is reported with its line number."""
        text = (
            "solid bad\n"
            "facet normal 0 0 1\n"
            "outer loop\n"
            "vertex 0 0 0\n"
            "vertex 1 zero 0\n"
            "vertex 0 1 0\n"
            "endloop\n"
            "endfacet\n"
            "endsolid bad\n"
        )
        with pytest.raises(UnparsableAsciiError) as info:
            read_stl(text.encode())
        assert info.value.line == 5

    def test_missing_endsolid(self):
        """An ASCII file must close its solid."""
        text = "solid x\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\n"
        with pytest.raises(TruncatedFileError):
            read_stl(text.encode())


class TestFiles:
    """save_stl / load_stl."""

    def test_save_and_load(self, tmp_path, box):
        """Files on disk round-trip."""
        path = save_stl(box((0, 0, 0), (5, 5, 5)), tmp_path / "cube.stl")
        mesh, _ = load_stl(path)
        assert mesh.signed_volume() == pytest.approx(125.0)

    def test_missing_file(self, tmp_path):
        """A missing file is an IO failure, not a parse error."""
        with pytest.raises(IoFailureError):
            load_stl(tmp_path / "nope.stl")
