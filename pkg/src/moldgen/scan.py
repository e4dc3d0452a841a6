"""Depth scanning: BVH-accelerated vertical ray casting over a pixel grid.

Rays are launched at pixel centers from the top plane downward and from the
bottom plane upward.  Both rays of a pixel live on the same vertical line, so
the scanner collects every surface crossing of that line once and takes the
highest hit for the top image and the lowest for the bottom image.  Boundary
hits (line through a triangle edge or vertex) are counted inclusively by both
adjacent triangles, which cannot change the extremes; a closed mesh therefore
never produces a one-sided miss.

The same line-query machinery serves crossing-count checks and voxel parity
fills, along any axis via coordinate permutation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .depth_core import DepthImage, DepthPair, GridSpec, Side, pair_thickness
from .errors import EmptyMesh, OutOfSlab
from .mesh_io import TriangleMesh

log = logging.getLogger(__name__)

DEFAULT_LEAF_SIZE = 8

# axis -> column permutation that maps "lines along axis" onto vertical lines
_AXIS_PERM = {0: (1, 2, 0), 1: (0, 2, 1), 2: (0, 1, 2)}


def _line_triangle(ax, ay, az, bx, by, bz, cx, cy, cz, px, py):
    """Intersection of vertical lines (px, py) with triangles, both broadcastable.

    Returns (hit, z).  Uses inclusive 2D edge tests in the xy projection;
    triangles with zero projected area never hit.  z is interpolated as
    za + wb*(zb-za) + wc*(zc-za), so a triangle whose vertices share one z
    value yields that value exactly.
    """
    wa = (bx - px) * (cy - py) - (by - py) * (cx - px)
    wb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    wc = (ax - px) * (by - py) - (ay - py) * (bx - px)
    den = wa + wb + wc
    pos = (wa >= 0) & (wb >= 0) & (wc >= 0)
    neg = (wa <= 0) & (wb <= 0) & (wc <= 0)
    hit = (pos | neg) & (den != 0)
    safe = np.where(den == 0, 1.0, den)
    z = az + (wb * (bz - az) + wc * (cz - az)) / safe
    return hit, z


class Bvh:
    """Median-split bounding box tree over triangles (leaf size configurable).

    Box queries are answered in the tree's own coordinate frame; build with
    `for_axis` to cast lines along x or y instead of z.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray,
                 leaf_size: int = DEFAULT_LEAF_SIZE):
        if triangles.shape[0] == 0:
            raise EmptyMesh("cannot build a BVH over zero triangles")
        self.leaf_size = int(leaf_size)
        tri_pts = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)]
        # per-triangle vertex coordinates, flat for cheap leaf gathering
        (self._ax, self._ay, self._az) = (tri_pts[:, 0, 0], tri_pts[:, 0, 1], tri_pts[:, 0, 2])
        (self._bx, self._by, self._bz) = (tri_pts[:, 1, 0], tri_pts[:, 1, 1], tri_pts[:, 1, 2])
        (self._cx, self._cy, self._cz) = (tri_pts[:, 2, 0], tri_pts[:, 2, 1], tri_pts[:, 2, 2])
        self._tri_min = tri_pts.min(axis=1)
        self._tri_max = tri_pts.max(axis=1)
        self._centroid = 0.5 * (self._tri_min + self._tri_max)
        self.order = np.arange(triangles.shape[0])
        # flat node arrays: bounds plus either (child, child) or (start, count)
        self._bmin: list[np.ndarray] = []
        self._bmax: list[np.ndarray] = []
        self._left: list[int] = []    # -1 marks a leaf
        self._right: list[int] = []
        self._start: list[int] = []
        self._count: list[int] = []
        self._build(0, triangles.shape[0])
        self._bmin = np.asarray(self._bmin)
        self._bmax = np.asarray(self._bmax)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> "Bvh":
        return cls(mesh.vertices, mesh.triangles, leaf_size)

    @classmethod
    def for_axis(cls, mesh: TriangleMesh, axis: int,
                 leaf_size: int = DEFAULT_LEAF_SIZE) -> "Bvh":
        """Tree whose vertical-line queries run along the given world axis."""
        perm = _AXIS_PERM[axis]
        return cls(mesh.vertices[:, perm], mesh.triangles, leaf_size)

    @property
    def node_count(self) -> int:
        return len(self._left)

    @property
    def leaf_count(self) -> int:
        return sum(1 for l in self._left if l < 0)

    def _build(self, start: int, end: int) -> int:
        idx = self.order[start:end]
        node = len(self._left)
        self._bmin.append(self._tri_min[idx].min(axis=0))
        self._bmax.append(self._tri_max[idx].max(axis=0))
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._count.append(end - start)
        if end - start > self.leaf_size:
            cent = self._centroid[idx]
            extent = cent.max(axis=0) - cent.min(axis=0)
            axis = int(np.argmax(extent))
            mid = (end - start) // 2
            if extent[axis] > 0:
                part = np.argpartition(cent[:, axis], mid)
                self.order[start:end] = idx[part]
            left = self._build(start, start + mid)
            right = self._build(start + mid, end)
            self._left[node] = left
            self._right[node] = right
        return node

    # -- vertical line queries -------------------------------------------

    def _leaf_eval(self, node: int, px, py, ids):
        s, c = self._start[node], self._count[node]
        tris = self.order[s:s + c]
        hit, z = _line_triangle(
            self._ax[tris][:, None], self._ay[tris][:, None], self._az[tris][:, None],
            self._bx[tris][:, None], self._by[tris][:, None], self._bz[tris][:, None],
            self._cx[tris][:, None], self._cy[tris][:, None], self._cz[tris][:, None],
            px[None, :], py[None, :],
        )
        rows, cols = np.nonzero(hit)
        return ids[cols], z[rows, cols]

    def _traverse(self, px: np.ndarray, py: np.ndarray, visit) -> None:
        stack = [(0, np.arange(px.shape[0]))]
        while stack:
            node, ids = stack.pop()
            x = px[ids]
            y = py[ids]
            bmin = self._bmin[node]
            bmax = self._bmax[node]
            keep = (x >= bmin[0]) & (x <= bmax[0]) & (y >= bmin[1]) & (y <= bmax[1])
            ids = ids[keep]
            if ids.size == 0:
                continue
            if self._left[node] < 0:
                visit(node, ids)
            else:
                stack.append((self._left[node], ids))
                stack.append((self._right[node], ids))

    def line_extremes(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """Lowest and highest surface crossing per vertical line (+-inf if none)."""
        px = np.ascontiguousarray(px, dtype=np.float64)
        py = np.ascontiguousarray(py, dtype=np.float64)
        zlo = np.full(px.shape[0], np.inf)
        zhi = np.full(px.shape[0], -np.inf)

        def visit(node, ids):
            h_ids, h_z = self._leaf_eval(node, px[ids], py[ids], ids)
            if h_ids.size:
                np.minimum.at(zlo, h_ids, h_z)
                np.maximum.at(zhi, h_ids, h_z)

        self._traverse(px, py, visit)
        return zlo, zhi

    def line_hits(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """All surface crossings as (line index, z) pairs, duplicates included."""
        px = np.ascontiguousarray(px, dtype=np.float64)
        py = np.ascontiguousarray(py, dtype=np.float64)
        out_ids: list[np.ndarray] = []
        out_z: list[np.ndarray] = []

        def visit(node, ids):
            h_ids, h_z = self._leaf_eval(node, px[ids], py[ids], ids)
            if h_ids.size:
                out_ids.append(h_ids)
                out_z.append(h_z)

        self._traverse(px, py, visit)
        if not out_ids:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return np.concatenate(out_ids), np.concatenate(out_z)

    # -- general rays (used for oracle comparisons) ------------------------

    def first_hit(self, origin, direction):
        """Nearest ray-triangle intersection: (t, triangle index) or None."""
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        inv = np.where(d != 0, 1.0 / np.where(d == 0, 1.0, d), np.inf)
        best_t = np.inf
        best_tri = -1
        stack = [0]
        while stack:
            node = stack.pop()
            if not self._ray_box(o, d, inv, self._bmin[node], self._bmax[node], best_t):
                continue
            if self._left[node] < 0:
                s, c = self._start[node], self._count[node]
                for tri in self.order[s:s + c]:
                    t = _ray_tri_mt(self._ax[tri], self._ay[tri], self._az[tri],
                                    self._bx[tri], self._by[tri], self._bz[tri],
                                    self._cx[tri], self._cy[tri], self._cz[tri], o, d)
                    if t is not None and t < best_t:
                        best_t, best_tri = t, int(tri)
            else:
                stack.append(self._left[node])
                stack.append(self._right[node])
        return None if best_tri < 0 else (best_t, best_tri)

    @staticmethod
    def _ray_box(o, d, inv, bmin, bmax, t_limit) -> bool:
        t0, t1 = 0.0, t_limit
        for k in range(3):
            if d[k] == 0.0:
                if o[k] < bmin[k] or o[k] > bmax[k]:
                    return False
            else:
                a = (bmin[k] - o[k]) * inv[k]
                b = (bmax[k] - o[k]) * inv[k]
                if a > b:
                    a, b = b, a
                t0 = max(t0, a)
                t1 = min(t1, b)
                if t0 > t1:
                    return False
        return True


def _ray_tri_mt(ax, ay, az, bx, by, bz, cx, cy, cz, o, d):
    """Moeller-Trumbore with inclusive boundaries; returns t >= 0 or None."""
    e1 = np.array([bx - ax, by - ay, bz - az])
    e2 = np.array([cx - ax, cy - ay, cz - az])
    pvec = np.cross(d, e2)
    det = float(e1 @ pvec)
    if det == 0.0:
        return None
    tvec = o - np.array([ax, ay, az])
    u = float(tvec @ pvec) / det
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = float(d @ qvec) / det
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ qvec) / det
    return t if t >= 0.0 else None


def build_bvh(mesh: TriangleMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> Bvh:
    return Bvh.from_mesh(mesh, leaf_size)


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------


def _brute_extremes(mesh: TriangleMesh, px, py,
                    tri_chunk: int = 512, ray_chunk: int = 8192):
    """All-triangles reference scan, chunked to bound memory."""
    zlo = np.full(px.shape[0], np.inf)
    zhi = np.full(px.shape[0], -np.inf)
    v = mesh.vertices
    t = mesh.triangles
    for ts in range(0, t.shape[0], tri_chunk):
        tt = t[ts:ts + tri_chunk]
        a, b, c = v[tt[:, 0]], v[tt[:, 1]], v[tt[:, 2]]
        for rs in range(0, px.shape[0], ray_chunk):
            sl = slice(rs, min(rs + ray_chunk, px.shape[0]))
            hit, z = _line_triangle(
                a[:, 0:1], a[:, 1:2], a[:, 2:3],
                b[:, 0:1], b[:, 1:2], b[:, 2:3],
                c[:, 0:1], c[:, 1:2], c[:, 2:3],
                px[None, sl], py[None, sl],
            )
            rows, cols = np.nonzero(hit)
            if rows.size:
                ids = cols + rs
                np.minimum.at(zlo, ids, z[rows, cols])
                np.maximum.at(zhi, ids, z[rows, cols])
    return zlo, zhi


def scan_mesh(mesh: TriangleMesh, spec: GridSpec, *, method: str = "bvh",
              bvh: Bvh | None = None, leaf_size: int = DEFAULT_LEAF_SIZE) -> DepthPair:
    """Compute a DepthPair for `mesh` on `spec`'s pixel grid.

    The mesh must fit within the slab z in [z_bottom, z_top].  First-hit
    semantics per side: top depth = z_top - highest crossing, bottom depth =
    lowest crossing - z_bottom; interior cavities are thereby invisible.
    `method` selects the accelerated path ("bvh") or the all-triangles
    reference ("brute"); both produce bit-identical images.
    """
    if mesh.triangles.shape[0] == 0:
        raise EmptyMesh("cannot scan an empty mesh")
    lo, hi = mesh.bounds
    tol = 1e-9 * max(1.0, spec.gap)
    if hi[2] > spec.z_top + tol or lo[2] < spec.z_bottom - tol:
        raise OutOfSlab(
            f"mesh spans z in [{lo[2]:g}, {hi[2]:g}], slab is "
            f"[{spec.z_bottom:g}, {spec.z_top:g}]"
        )
    if not mesh.is_closed:
        log.warning("scanning a mesh that is not closed; one-sided columns are possible")

    xs, ys = spec.pixel_centers()
    X, Y = np.meshgrid(xs, ys)
    px, py = X.ravel(), Y.ravel()
    if method == "bvh":
        tree = bvh or Bvh.from_mesh(mesh, leaf_size)
        zlo, zhi = tree.line_extremes(px, py)
    elif method == "brute":
        zlo, zhi = _brute_extremes(mesh, px, py)
    else:
        raise ValueError(f"unknown scan method {method!r}")

    gap = spec.gap
    has_hit = zhi > -np.inf
    top = np.where(has_hit, spec.z_top - zhi, gap).reshape(spec.height, spec.width)
    bottom = np.where(has_hit, zlo - spec.z_bottom, gap).reshape(spec.height, spec.width)
    return DepthPair(
        top=DepthImage(spec, Side.TOP, top),
        bottom=DepthImage(spec, Side.BOTTOM, bottom),
    )


# ---------------------------------------------------------------------------
# Line-hit post-processing shared by crossing checks and parity fills
# ---------------------------------------------------------------------------


def merged_line_hits(bvh: Bvh, px, py, merge_tol: float):
    """Sorted, deduplicated crossings per line in CSR form: (offsets, z values).

    Crossings closer than merge_tol are counted once; this collapses the
    duplicate reports that inclusive boundary tests produce for hits on
    shared triangle edges.
    """
    n = np.asarray(px).shape[0]
    ids, zs = bvh.line_hits(px, py)
    if ids.size == 0:
        return np.zeros(n + 1, dtype=np.int64), zs
    order = np.lexsort((zs, ids))
    ids = ids[order]
    zs = zs[order]
    first = np.ones(ids.shape[0], dtype=bool)
    first[1:] = (ids[1:] != ids[:-1]) | (zs[1:] - zs[:-1] > merge_tol)
    ids = ids[first]
    zs = zs[first]
    counts = np.bincount(ids, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, zs


@dataclass(frozen=True)
class ScanStats:
    solid_pixels: int
    min_thickness: float
    max_thickness: float
    mean_thickness: float
    projected_area: float
    material_volume: float


def scan_stats(pair: DepthPair, eps_thick: float | None = None) -> ScanStats:
    """Solid-pixel count, thickness stats, projected area, material volume."""
    t = pair_thickness(pair)
    solid = pair.solid_mask(eps_thick)
    count = int(solid.sum())
    cell_area = pair.spec.cell_size ** 2
    if count == 0:
        return ScanStats(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    ts = t[solid]
    return ScanStats(
        solid_pixels=count,
        min_thickness=float(ts.min()),
        max_thickness=float(ts.max()),
        mean_thickness=float(ts.mean()),
        projected_area=count * cell_area,
        material_volume=float(t.sum() * cell_area),
    )
