"""Triangle mesh container, STL/OBJ readers and writers, signed volume.

Meshes are immutable after construction.  Loading deduplicates vertices by
exact coordinates (a tolerance weld is available separately for dirty CAD
exports) and drops degenerate triangles, reporting how many were removed.
Stored STL normals are ignored; winding is the source of truth.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import EmptyMesh, IoFailure, OpenMesh, ParseError

log = logging.getLogger(__name__)

DEGENERATE_AREA_TOL = 1e-12


class MeshFormat(Enum):
    AUTO = "auto"
    STL_BINARY = "stl-binary"
    STL_ASCII = "stl-ascii"
    OBJ = "obj"


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup with integrity flags.

    is_closed: every undirected edge is shared by exactly two triangles.
    is_consistently_oriented: no undirected edge is traversed twice in the
    same direction.  When both hold, the signed volume via the divergence
    theorem is well defined.
    """

    vertices: np.ndarray          # (n, 3) float64
    triangles: np.ndarray         # (m, 3) int64
    is_closed: bool
    is_consistently_oriented: bool
    degenerate_dropped: int = 0

    def __post_init__(self):
        for name in ("vertices", "triangles"):
            arr = getattr(self, name)
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def build(cls, vertices, triangles) -> "TriangleMesh":
        """Construct from raw arrays: exact-coordinate dedup, degenerate drop, flags."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.shape[0] and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ParseError("triangle index out of range")

        if len(vertices):
            uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
            vertices = uniq
            triangles = inverse.reshape(-1)[triangles.reshape(-1)].reshape(-1, 3)

        dropped = 0
        if triangles.shape[0]:
            tri_pts = vertices[triangles]
            cross = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
            area = 0.5 * np.linalg.norm(cross, axis=1)
            keep = area > DEGENERATE_AREA_TOL
            dropped = int((~keep).sum())
            triangles = triangles[keep]

        closed, oriented = _integrity_flags(triangles)
        return cls(vertices, triangles, closed, oriented, dropped)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise EmptyMesh("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, *, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Uniformly scaled then translated copy (flags are preserved)."""
        v = self.vertices * scale + np.asarray(offset, dtype=np.float64)
        return TriangleMesh(v, self.triangles, self.is_closed,
                            self.is_consistently_oriented, self.degenerate_dropped)


def _integrity_flags(triangles: np.ndarray) -> tuple[bool, bool]:
    if triangles.shape[0] == 0:
        return False, True
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    _, dir_counts = np.unique(directed, axis=0, return_counts=True)
    oriented = bool(dir_counts.max() == 1)
    undirected = np.sort(directed, axis=1)
    _, und_counts = np.unique(undirected, axis=0, return_counts=True)
    closed = bool(und_counts.min() == 2 and und_counts.max() == 2)
    return closed, oriented


def signed_volume(mesh: TriangleMesh) -> float:
    """Volume by the divergence theorem: sum of v0 . (v1 x v2) / 6 per triangle.

    Positive for outward-oriented closed meshes; requires a closed,
    consistently oriented mesh.
    """
    if not (mesh.is_closed and mesh.is_consistently_oriented):
        raise OpenMesh("signed volume needs a closed, consistently oriented mesh")
    tri = mesh.vertices[mesh.triangles]
    det = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    return float(det.sum() / 6.0)


def weld_vertices(mesh: TriangleMesh, tolerance: float) -> TriangleMesh:
    """Optional weld pass merging vertices within `tolerance` (for dirty CAD exports)."""
    if tolerance <= 0:
        return mesh
    keys = np.round(mesh.vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    welded = mesh.vertices[first]
    triangles = inverse.reshape(-1)[mesh.triangles.reshape(-1)].reshape(-1, 3)
    return TriangleMesh.build(welded, triangles)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_mesh(path, fmt: MeshFormat = MeshFormat.AUTO) -> TriangleMesh:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if fmt is MeshFormat.AUTO:
        fmt = _detect_format(path, raw)
    if fmt is MeshFormat.OBJ:
        mesh = _parse_obj(raw)
    elif fmt is MeshFormat.STL_ASCII:
        mesh = _parse_stl_ascii(raw)
    else:
        mesh = _parse_stl_binary(raw)
    if mesh.triangles.shape[0] == 0:
        raise EmptyMesh(f"{path} contains no usable triangles")
    if mesh.degenerate_dropped:
        log.warning("%s: dropped %d degenerate triangles", path, mesh.degenerate_dropped)
    return mesh


def _detect_format(path: Path, raw: bytes) -> MeshFormat:
    if path.suffix.lower() == ".obj":
        return MeshFormat.OBJ
    # A binary STL may begin with b"solid"; only treat the file as ASCII when
    # facet records actually parse as text.
    if raw[:5].lower() == b"solid" and b"facet" in raw[:2048]:
        return MeshFormat.STL_ASCII
    return MeshFormat.STL_BINARY


def _parse_stl_binary(raw: bytes) -> TriangleMesh:
    if len(raw) < 84:
        raise ParseError("binary STL shorter than its 84-byte preamble", offset=len(raw))
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) < expected:
        raise ParseError(
            f"binary STL promises {count} triangles ({expected} bytes), file has {len(raw)}",
            offset=len(raw),
        )
    rec = np.dtype([("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")])
    body = np.frombuffer(raw, dtype=rec, count=count, offset=84)
    pts = body["verts"].astype(np.float64).reshape(-1, 3)
    tris = np.arange(len(pts), dtype=np.int64).reshape(-1, 3)
    return TriangleMesh.build(pts, tris)


_VERTEX_RE = re.compile(rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)")


def _parse_stl_ascii(raw: bytes) -> TriangleMesh:
    coords = []
    for m in _VERTEX_RE.finditer(raw):
        try:
            coords.append([float(m.group(1)), float(m.group(2)), float(m.group(3))])
        except ValueError as exc:
            raise ParseError(f"bad vertex coordinate: {exc}", offset=m.start()) from exc
    if len(coords) % 3 != 0:
        raise ParseError(f"ASCII STL has {len(coords)} vertices, not a multiple of 3",
                         offset=len(raw))
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    tris = np.arange(len(pts), dtype=np.int64).reshape(-1, 3)
    return TriangleMesh.build(pts, tris)


def _parse_obj(raw: bytes) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    skipped: set[bytes] = set()
    offset = 0
    for line in raw.split(b"\n"):
        stripped = line.strip()
        if stripped and not stripped.startswith(b"#"):
            parts = stripped.split()
            tag = parts[0]
            if tag == b"v":
                if len(parts) < 4:
                    raise ParseError("v record needs 3 coordinates", offset=offset)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ParseError(f"bad vertex: {exc}", offset=offset) from exc
            elif tag == b"f":
                idx = []
                for token in parts[1:]:
                    head = token.split(b"/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ParseError(f"bad face index {token!r}", offset=offset) from exc
                    if i == 0:
                        raise ParseError("OBJ indices are 1-based; 0 is invalid", offset=offset)
                    # Negative indices count back from the vertices seen so far.
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise ParseError("face needs at least 3 vertices", offset=offset)
                for k in range(1, len(idx) - 1):  # fan triangulation
                    faces.append((idx[0], idx[k], idx[k + 1]))
            else:
                skipped.add(bytes(tag))
        offset += len(line) + 1
    if skipped:
        log.warning("OBJ: skipped record types %s",
                    ", ".join(sorted(t.decode("ascii", "replace") for t in skipped)))
    pts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if tris.shape[0] and (tris.min() < 0 or tris.max() >= len(pts)):
        raise ParseError("face index out of range", offset=offset)
    return TriangleMesh.build(pts, tris)


# ---------------------------------------------------------------------------
# Saving
# ---------------------------------------------------------------------------


def save_mesh(mesh: TriangleMesh, path, fmt: MeshFormat = MeshFormat.AUTO) -> None:
    if mesh.triangles.shape[0] == 0:
        raise EmptyMesh("refusing to save a mesh without triangles")
    path = Path(path)
    if fmt is MeshFormat.AUTO:
        fmt = MeshFormat.OBJ if path.suffix.lower() == ".obj" else MeshFormat.STL_BINARY
    try:
        if fmt is MeshFormat.STL_BINARY:
            path.write_bytes(_stl_binary_bytes(mesh))
        elif fmt is MeshFormat.STL_ASCII:
            path.write_bytes(_stl_ascii_bytes(mesh))
        else:
            path.write_bytes(_obj_bytes(mesh))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _face_normals(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.triangles]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def _stl_binary_bytes(mesh: TriangleMesh) -> bytes:
    m = mesh.triangles.shape[0]
    header = b"moldgen binary stl" + b" " * (80 - 18)
    rec = np.zeros(m, dtype=np.dtype([("normal", "<f4", 3), ("verts", "<f4", (3, 3)),
                                      ("attr", "<u2")]))
    rec["normal"] = _face_normals(mesh).astype("<f4")
    rec["verts"] = mesh.vertices[mesh.triangles].astype("<f4")
    return header + struct.pack("<I", m) + rec.tobytes()


def _stl_ascii_bytes(mesh: TriangleMesh) -> bytes:
    normals = _face_normals(mesh)
    tri = mesh.vertices[mesh.triangles]
    lines = ["solid moldgen"]
    for n, pts in zip(normals, tri):
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        for p in pts:
            lines.append(f"      vertex {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append("endsolid moldgen\n")
    return "\n".join(lines).encode("ascii")


def _obj_bytes(mesh: TriangleMesh) -> bytes:
    lines = [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in mesh.vertices]
    lines += [f"f {t[0]+1} {t[1]+1} {t[2]+1}" for t in mesh.triangles]
    return ("\n".join(lines) + "\n").encode("ascii")


# ---------------------------------------------------------------------------
# Simple constructions used across the package and its tests
# ---------------------------------------------------------------------------


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned closed box between corner points lo and hi, outward-oriented."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom (-z)
        [4, 5, 6], [4, 6, 7],  # top (+z)
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [3, 0, 4], [3, 4, 7],  # -x
    ])
    return TriangleMesh.build(v, f)
