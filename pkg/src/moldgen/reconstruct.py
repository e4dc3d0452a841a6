"""Watertight solid meshes from top/bottom depth image pairs.

Block mode turns every solid pixel into a rectangular column from
z_bottom + bottom(i,j) up to z_top - top(i,j).  Horizontal faces cover the
pixel footprint; between laterally adjacent columns only the z-ranges not
shared with the neighbour become wall quads, so the union of columns is
meshed as one boundary surface.  The resulting solid is closed, outward
oriented, and its signed volume equals the column sum thickness * cell^2
up to float rounding.

Two combinatorial hazards of per-pixel columns are handled explicitly:

* T-junctions: a wall's vertical edge along a grid corner line must be split
  wherever any other column interval incident to that corner line starts or
  ends, otherwise edges of neighbouring faces do not match vertex-for-vertex.
* Diagonal contact: where only the two diagonal pixels of a 2x2 block carry
  material over the same z range, four wall faces meet along one corner edge.
  The edges of one diagonal member are split at their midpoint so each half
  pairs with its own column's other wall, keeping every edge on exactly two
  triangles (the solid then touches itself along that line, which is fine).

Smooth mode triangulates the pixel-center heights instead (two triangles per
fully solid 2x2 block of centers, one for 3-of-4 blocks) and closes the
silhouette with vertical skirts between the top and bottom sheets.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .depth_core import MISS_REL_TOL, DepthPair
from .errors import InvertedColumn, NoSolidPixels, OneSidedMiss, OpenMesh
from .mesh_io import TriangleMesh
from .scan import Bvh, merged_line_hits


class ReconstructionMode(Enum):
    BLOCK = "block"
    SMOOTH = "smooth"


def reconstruct_solid(pair: DepthPair, mode: ReconstructionMode = ReconstructionMode.BLOCK,
                      *, eps_thick: float | None = None) -> TriangleMesh:
    """Build a closed, overhang-free solid from a valid DepthPair."""
    spec = pair.spec
    gap = spec.gap
    if eps_thick is None:
        eps_thick = MISS_REL_TOL * gap

    top = pair.top.data
    bottom = pair.bottom.data
    miss_t = pair.top.miss_mask()
    miss_b = pair.bottom.miss_mask()
    one_sided = miss_t ^ miss_b
    if one_sided.any():
        j, i = np.argwhere(one_sided)[0]
        raise OneSidedMiss(
            f"{int(one_sided.sum())} pixels have exactly one miss side, "
            f"first at (i={i}, j={j})"
        )
    both_hit = ~(miss_t | miss_b)
    t_raw = gap - top - bottom
    inverted = both_hit & (t_raw < -eps_thick)
    if inverted.any():
        j, i = np.argwhere(inverted)[0]
        raise InvertedColumn(
            f"top surface below bottom surface at (i={i}, j={j}) by {-t_raw[j, i]:g}"
        )
    solid = both_hit & (t_raw > eps_thick)
    if not solid.any():
        raise NoSolidPixels("no pixel carries material thicker than eps_thick")

    z_hi = spec.z_top - top       # top surface height per pixel
    z_lo = spec.z_bottom + bottom
    if mode is ReconstructionMode.BLOCK:
        tris = _block_triangles(spec, solid, z_lo, z_hi)
    elif mode is ReconstructionMode.SMOOTH:
        tris = _smooth_triangles(spec, solid, z_lo, z_hi)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    coords = np.concatenate(tris) if tris else np.empty((0, 3, 3))
    n = coords.shape[0]
    flat = coords.reshape(-1, 3)
    return TriangleMesh.build(flat, np.arange(3 * n).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Block mode
# ---------------------------------------------------------------------------

# direction -> (dj, di) of the neighbour pixel
_DIRS = {"+x": (0, 1), "-x": (0, -1), "+y": (1, 0), "-y": (-1, 0)}


def _shifted(arr, dj, di, fill):
    """arr values of the (dj, di)-neighbour of every pixel, `fill` past the rim."""
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    js = slice(max(dj, 0), h + min(dj, 0))
    is_ = slice(max(di, 0), w + min(di, 0))
    jd = slice(max(-dj, 0), h + min(-dj, 0))
    id_ = slice(max(-di, 0), w + min(-di, 0))
    out[jd, id_] = arr[js, is_]
    return out


def _wall_segments(solid, z_lo, z_hi, dj, di):
    """Exclusive z-ranges of each solid pixel against one neighbour direction.

    Returns (jj, ii, z0, z1) arrays; a pixel contributes up to two segments
    (below and above the neighbour's column).
    """
    n_solid = _shifted(solid, dj, di, False)
    n_lo = _shifted(z_lo, dj, di, 0.0)
    n_hi = _shifted(z_hi, dj, di, 0.0)

    hi1 = np.where(n_solid, np.minimum(n_lo, z_hi), z_hi)
    valid1 = solid & (hi1 > z_lo)
    lo2 = np.maximum(n_hi, z_lo)
    valid2 = solid & n_solid & (z_hi > lo2)

    jj1, ii1 = np.nonzero(valid1)
    jj2, ii2 = np.nonzero(valid2)
    jj = np.concatenate([jj1, jj2])
    ii = np.concatenate([ii1, ii2])
    z0 = np.concatenate([z_lo[jj1, ii1], lo2[jj2, ii2]])
    z1 = np.concatenate([hi1[jj1, ii1], z_hi[jj2, ii2]])
    return jj, ii, z0, z1


def _corner_tables(solid, z_lo, z_hi):
    """Per corner-line breakpoints and diagonal-contact split points.

    A corner line is the vertical line through grid vertex (iv, jv).  Its
    breakpoint set P holds the interval endpoints of the up-to-four incident
    solid columns; wall edges on the line are later split at every interior
    breakpoint so all faces meeting there agree vertex-for-vertex.

    For every elementary interval of P carrying material only on the two
    diagonal pixels, the midpoint is recorded against the lexicographically
    smaller pixel of the pair; that pixel's wall edges get the extra split.
    """
    h, w = solid.shape
    pad_solid = np.zeros((h + 2, w + 2), dtype=bool)
    pad_solid[1:-1, 1:-1] = solid

    # incident pixels of corner (iv, jv): (jv-1, iv-1), (jv-1, iv), (jv, iv-1), (jv, iv)
    a = pad_solid[0:-1, 0:-1]   # (h+1, w+1) each
    b = pad_solid[0:-1, 1:]
    c = pad_solid[1:, 0:-1]
    d = pad_solid[1:, 1:]

    vals = np.full((h + 1, w + 1, 8), np.nan)
    pz_lo = np.full((h + 2, w + 2), np.nan)
    pz_hi = np.full((h + 2, w + 2), np.nan)
    pz_lo[1:-1, 1:-1] = np.where(solid, z_lo, np.nan)
    pz_hi[1:-1, 1:-1] = np.where(solid, z_hi, np.nan)
    vals[:, :, 0] = pz_lo[0:-1, 0:-1]
    vals[:, :, 1] = pz_hi[0:-1, 0:-1]
    vals[:, :, 2] = pz_lo[0:-1, 1:]
    vals[:, :, 3] = pz_hi[0:-1, 1:]
    vals[:, :, 4] = pz_lo[1:, 0:-1]
    vals[:, :, 5] = pz_hi[1:, 0:-1]
    vals[:, :, 6] = pz_lo[1:, 1:]
    vals[:, :, 7] = pz_hi[1:, 1:]

    sorted_vals = np.sort(vals, axis=2)  # NaNs go last
    distinct = np.zeros(sorted_vals.shape, dtype=bool)
    finite = np.isfinite(sorted_vals)
    distinct[:, :, 0] = finite[:, :, 0]
    distinct[:, :, 1:] = finite[:, :, 1:] & (sorted_vals[:, :, 1:] != sorted_vals[:, :, :-1])
    n_unique = distinct.sum(axis=2)

    diag_candidate = (a & d & ~(b & c)) | (b & c & ~(a & d))
    interesting = (n_unique > 2) | diag_candidate

    corner_pts: dict[tuple[int, int], np.ndarray] = {}
    corner_extras: dict[tuple[int, int, int, int], list[float]] = {}
    for jv, iv in zip(*np.nonzero(interesting)):
        row = sorted_vals[jv, iv]
        pts = row[distinct[jv, iv]]
        corner_pts[(iv, jv)] = pts
        if pts.shape[0] < 2:
            continue
        # pixel coordinates of the four incident cells, None when not solid
        cells = []
        for pj, pi in ((jv - 1, iv - 1), (jv - 1, iv), (jv, iv - 1), (jv, iv)):
            if 0 <= pj < h and 0 <= pi < w and solid[pj, pi]:
                cells.append((pj, pi, z_lo[pj, pi], z_hi[pj, pi]))
            else:
                cells.append(None)
        ca, cb, cc, cd = cells
        for e0, e1 in zip(pts[:-1], pts[1:]):
            probe = 0.5 * (e0 + e1)
            inside = [cell is not None and cell[2] <= probe <= cell[3] for cell in cells]
            if inside[0] and inside[3] and not inside[1] and not inside[2]:
                owner = ca
            elif inside[1] and inside[2] and not inside[0] and not inside[3]:
                owner = cb
            else:
                continue
            mid = 0.5 * (e0 + e1)
            if e0 < mid < e1:  # split impossible for one-ulp intervals
                corner_extras.setdefault((iv, jv, owner[0], owner[1]), []).append(mid)
    return interesting, corner_pts, corner_extras


def _block_triangles(spec, solid, z_lo, z_hi):
    gx, gy = spec.grid_lines()
    jj, ii = np.nonzero(solid)
    zt = z_hi[jj, ii]
    zb = z_lo[jj, ii]
    tris: list[np.ndarray] = []

    # horizontal faces: fixed diagonal from the (i, j) corner
    x0, x1 = gx[ii], gx[ii + 1]
    y0, y1 = gy[jj], gy[jj + 1]
    v00 = np.stack([x0, y0, zt], axis=1)
    v10 = np.stack([x1, y0, zt], axis=1)
    v11 = np.stack([x1, y1, zt], axis=1)
    v01 = np.stack([x0, y1, zt], axis=1)
    tris.append(np.stack([v00, v10, v11], axis=1))
    tris.append(np.stack([v00, v11, v01], axis=1))
    w00 = np.stack([x0, y0, zb], axis=1)
    w10 = np.stack([x1, y0, zb], axis=1)
    w11 = np.stack([x1, y1, zb], axis=1)
    w01 = np.stack([x0, y1, zb], axis=1)
    tris.append(np.stack([w00, w11, w10], axis=1))
    tris.append(np.stack([w00, w01, w11], axis=1))

    interesting, corner_pts, corner_extras = _corner_tables(solid, z_lo, z_hi)

    def edge_points(iv, jv, pj, pi, s0, s1):
        pts = []
        base = corner_pts.get((iv, jv))
        if base is not None:
            pts.extend(base[(base > s0) & (base < s1)])
        extra = corner_extras.get((iv, jv, pj, pi))
        if extra:
            pts.extend(z for z in extra if s0 < z < s1)
        return sorted(set(pts))

    for dname, (dj, di) in _DIRS.items():
        sj, si, s0, s1 = _wall_segments(solid, z_lo, z_hi, dj, di)
        if sj.size == 0:
            continue
        # wall plane and the u-extent of the shared cell edge
        if dname == "+x":
            plane = gx[si + 1]
            u0, u1 = gy[sj], gy[sj + 1]
            ca = np.stack([si + 1, sj], axis=1)      # corner at u0
            cb = np.stack([si + 1, sj + 1], axis=1)  # corner at u1
        elif dname == "-x":
            plane = gx[si]
            u0, u1 = gy[sj], gy[sj + 1]
            ca = np.stack([si, sj], axis=1)
            cb = np.stack([si, sj + 1], axis=1)
        elif dname == "+y":
            plane = gy[sj + 1]
            u0, u1 = gx[si], gx[si + 1]
            ca = np.stack([si, sj + 1], axis=1)
            cb = np.stack([si + 1, sj + 1], axis=1)
        else:
            plane = gy[sj]
            u0, u1 = gx[si], gx[si + 1]
            ca = np.stack([si, sj], axis=1)
            cb = np.stack([si + 1, sj], axis=1)

        touchy = (interesting[ca[:, 1], ca[:, 0]] | interesting[cb[:, 1], cb[:, 0]])
        simple = ~touchy
        if simple.any():
            tris.append(_wall_quads(dname, plane[simple], u0[simple], u1[simple],
                                    s0[simple], s1[simple]))
        for k in np.nonzero(touchy)[0]:
            pts_a = edge_points(ca[k, 0], ca[k, 1], sj[k], si[k], s0[k], s1[k])
            pts_b = edge_points(cb[k, 0], cb[k, 1], sj[k], si[k], s0[k], s1[k])
            if not pts_a and not pts_b:
                tris.append(_wall_quads(dname, plane[k:k + 1], u0[k:k + 1],
                                        u1[k:k + 1], s0[k:k + 1], s1[k:k + 1]))
            else:
                tris.append(_wall_polygon(dname, plane[k], u0[k], u1[k],
                                          s0[k], s1[k], pts_a, pts_b))
    return tris


# outward-oriented corner cycle per direction, given in (u, z):
# [(first, z0), (second, z0), (second, z1), (first, z1)]
_WALL_FIRST_SECOND = {"+x": (0, 1), "-x": (1, 0), "+y": (1, 0), "-y": (0, 1)}


def _uv_to_xyz(dname, plane, u, z):
    if dname in ("+x", "-x"):
        return np.stack(np.broadcast_arrays(plane, u, z), axis=-1)
    return np.stack(np.broadcast_arrays(u, plane, z), axis=-1)


def _wall_quads(dname, plane, u0, u1, z0, z1):
    fi, se = _WALL_FIRST_SECOND[dname]
    us = (u0, u1)
    p0 = _uv_to_xyz(dname, plane, us[fi], z0)
    p1 = _uv_to_xyz(dname, plane, us[se], z0)
    p2 = _uv_to_xyz(dname, plane, us[se], z1)
    p3 = _uv_to_xyz(dname, plane, us[fi], z1)
    return np.concatenate([np.stack([p0, p1, p2], axis=1),
                           np.stack([p0, p2, p3], axis=1)])


def _wall_polygon(dname, plane, u0, u1, z0, z1, pts_u0, pts_u1):
    """Fan-triangulate one wall whose vertical edges carry split points."""
    fi, se = _WALL_FIRST_SECOND[dname]
    us = (u0, u1)
    pts = (pts_u0, pts_u1)
    loop = [(us[fi], z0), (us[se], z0)]
    loop += [(us[se], z) for z in pts[se]]          # ascend the second edge
    loop += [(us[se], z1), (us[fi], z1)]
    loop += [(us[fi], z) for z in reversed(pts[fi])]  # descend the first edge
    arr = np.array([[_p3(dname, plane, u, z) for (u, z) in
                     (loop[0], loop[k], loop[k + 1])]
                    for k in range(1, len(loop) - 1)])
    return arr


def _p3(dname, plane, u, z):
    if dname in ("+x", "-x"):
        return (plane, u, z)
    return (u, plane, z)


# ---------------------------------------------------------------------------
# Smooth mode
# ---------------------------------------------------------------------------


def _smooth_triangles(spec, solid, z_lo, z_hi):
    h, w = solid.shape
    xs, ys = spec.pixel_centers()

    # triangles over pixel-center indices, counter-clockwise seen from above
    cell_tris: list[tuple[tuple[int, int], tuple[int, int], tuple[int, int]]] = []
    for j in range(h - 1):
        for i in range(w - 1):
            p00, p10 = (j, i), (j, i + 1)
            p01, p11 = (j + 1, i), (j + 1, i + 1)
            flags = (solid[p00], solid[p10[0], p10[1]],
                     solid[p01[0], p01[1]], solid[p11[0], p11[1]])
            n = sum(bool(f) for f in flags)
            if n == 4:
                cell_tris.append((p00, p10, p11))
                cell_tris.append((p00, p11, p01))
            elif n == 3:
                if not flags[3]:
                    cell_tris.append((p00, p10, p01))
                elif not flags[2]:
                    cell_tris.append((p00, p10, p11))
                elif not flags[1]:
                    cell_tris.append((p00, p11, p01))
                else:
                    cell_tris.append((p10, p11, p01))
    if not cell_tris:
        raise NoSolidPixels(
            "smooth mode needs at least three mutually adjacent solid pixel centers"
        )

    def top_pt(p):
        return (xs[p[1]], ys[p[0]], z_hi[p])

    def bot_pt(p):
        return (xs[p[1]], ys[p[0]], z_lo[p])

    tris: list[np.ndarray] = []
    tris.append(np.array([[top_pt(a), top_pt(b), top_pt(c)] for a, b, c in cell_tris]))
    tris.append(np.array([[bot_pt(a), bot_pt(c), bot_pt(b)] for a, b, c in cell_tris]))

    # silhouette boundary: directed edges used exactly once
    edge_set: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    for a, b, c in cell_tris:
        for p, q in ((a, b), (b, c), (c, a)):
            edge_set.add((p, q))
    boundary = [(p, q) for (p, q) in edge_set if (q, p) not in edge_set]

    # passages through pinch vertices get combinatorially distinct skirt edges
    ins = defaultdict(list)
    outs = defaultdict(list)
    for p, q in boundary:
        outs[p].append((p, q))
        ins[q].append((p, q))

    def angle(v, other):
        return np.arctan2(ys[other[0]] - ys[v[0]], xs[other[1]] - xs[v[1]])

    start_pts: dict[tuple, list[float]] = defaultdict(list)
    end_pts: dict[tuple, list[float]] = defaultdict(list)
    for v in ins:
        if len(ins[v]) <= 1:
            continue
        in_sorted = sorted(ins[v], key=lambda e: angle(v, e[0]))
        out_sorted = sorted(outs[v], key=lambda e: angle(v, e[1]))
        zt, zb = z_hi[v], z_lo[v]
        for k in range(1, len(in_sorted)):
            fracs = [zb + (zt - zb) * j / (k + 1) for j in range(1, k + 1)]
            end_pts[in_sorted[k]].extend(fracs)
            start_pts[out_sorted[k]].extend(fracs)

    skirt: list[np.ndarray] = []
    for p, q in boundary:
        tq, tp = top_pt(q), top_pt(p)
        bp, bq = bot_pt(p), bot_pt(q)
        p_subs = sorted(set(start_pts.get((p, q), [])), reverse=True)
        q_subs = sorted(set(end_pts.get((p, q), [])))
        loop = [tq, tp]
        loop += [(tp[0], tp[1], z) for z in p_subs]   # descend the p edge
        loop += [bp, bq]
        loop += [(tq[0], tq[1], z) for z in q_subs]   # ascend the q edge
        for k in range(1, len(loop) - 1):
            skirt.append(np.array([[loop[0], loop[k], loop[k + 1]]]))
    tris.extend(skirt)
    return tris


# ---------------------------------------------------------------------------
# Moldability check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckReport:
    passed: bool
    rays: int
    max_crossings: int
    violating_rays: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.rays} rays, max crossings {self.max_crossings}, "
                f"{self.violating_rays} violations")


def monotone_z_check(mesh: TriangleMesh, samples: int = 10000, seed: int = 0,
                     *, bvh: Bvh | None = None) -> CheckReport:
    """Cast random vertical lines through the bounding box and count crossings.

    PASS means every line crossed the boundary 0 or 2 times, i.e. material
    occupies a single interval per column and the part can release from a
    rigid two-part mold opening along +-z.
    """
    if not (mesh.is_closed and mesh.is_consistently_oriented):
        raise OpenMesh("moldability check needs a closed, oriented mesh")
    lo, hi = mesh.bounds
    rng = np.random.default_rng(seed)
    px = rng.uniform(lo[0], hi[0], samples)
    py = rng.uniform(lo[1], hi[1], samples)
    tree = bvh or Bvh.from_mesh(mesh)
    tol = 1e-9 * max(1.0, hi[2] - lo[2])
    offsets, _ = merged_line_hits(tree, px, py, tol)
    counts = np.diff(offsets)
    bad = (counts != 0) & (counts != 2)
    return CheckReport(
        passed=not bad.any(),
        rays=samples,
        max_crossings=int(counts.max()) if counts.size else 0,
        violating_rays=int(bad.sum()),
    )
