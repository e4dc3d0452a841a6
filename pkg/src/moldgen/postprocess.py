"""Repair of generated depth pairs and voxel boolean hole features.

clean_pair turns a generated unit-range sample into a DepthPair that the
reconstructor accepts: near-miss pixels snap to the exact sentinel, columns
without positive thickness become empty, and small disconnected islands are
removed.

subtract_holes voxelizes a closed solid, clears voxels inside the requested
cylinders, and re-extracts a blocky boundary surface whose volume is exactly
the surviving voxel count times the voxel volume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .depth_core import (
    DepthImage,
    DepthPair,
    DepthSample,
    GridSpec,
    MISS_REL_TOL,
    Norm,
    Side,
)
from .errors import AllEmpty, DegenerateHole, InvariantViolation, IoFailure, OpenMesh
from .mesh_io import TriangleMesh
from .scan import Bvh, merged_line_hits


@dataclass(frozen=True)
class CleanOptions:
    snap_band: float = 0.05      # unit-range width of the near-sentinel band
    min_component: int = 4       # smaller 8-connected solid islands are dropped
    min_thickness: float = 1e-6  # unit-range thickness below which a column is empty


def clean_pair(sample: DepthSample, opts: CleanOptions = CleanOptions(),
               spec: GridSpec | None = None) -> DepthPair:
    """Discretize a generated sample into a valid DepthPair.

    Pixels whose depth sum reaches the near-sentinel band, whose single side
    is near-sentinel, or whose thickness is not positive all become empty;
    solid components below min_component pixels are erased.  A pair produced
    by scanning passes through unchanged.
    """
    spec = spec or sample.spec
    if spec is None:
        raise InvariantViolation("clean_pair needs a GridSpec")
    if sample.norm is not Norm.UNIT_RANGE:
        raise InvariantViolation(f"clean_pair expects unit-range input, got {sample.norm}")

    top = np.clip(sample.top, 0.0, 1.0)
    bottom = np.clip(sample.bottom, 0.0, 1.0)
    near = 1.0 - opts.snap_band
    empty = (top + bottom >= 2.0 * near) | (top >= near) | (bottom >= near)
    thickness = 1.0 - top - bottom
    empty |= thickness <= opts.min_thickness

    solid = ~empty
    if opts.min_component > 1 and solid.any():
        labels, n = ndimage.label(solid, structure=np.ones((3, 3), dtype=int))
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        small = sizes < opts.min_component
        small[0] = False
        empty |= small[labels]
        solid = ~empty
    if not solid.any():
        raise AllEmpty("no solid pixels survive cleaning")

    gap = spec.gap
    top_d = np.where(solid, top * gap, gap)
    bottom_d = np.where(solid, bottom * gap, gap)
    return DepthPair(
        top=DepthImage(spec, Side.TOP, top_d),
        bottom=DepthImage(spec, Side.BOTTOM, bottom_d),
    )


# ---------------------------------------------------------------------------
# Cylinder holes via voxel booleans
# ---------------------------------------------------------------------------

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Cylinder:
    axis: str                 # "x", "y", or "z"
    center: tuple[float, float, float]
    radius: float
    through: bool = True

    def __post_init__(self):
        if self.axis not in _AXIS_INDEX:
            raise ValueError(f"axis must be one of x/y/z, got {self.axis!r}")
        if not self.radius > 0:
            raise DegenerateHole(f"radius must be positive, got {self.radius}")
        if not self.through:
            raise ValueError("blind holes are not supported; through must be true")


def load_holes(path) -> list[Cylinder]:
    """Hole list from JSON: [{"axis": "y", "center": [x,y,z], "radius": r, "through": true}]."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    holes = []
    for item in doc:
        holes.append(Cylinder(
            axis=str(item["axis"]).lower(),
            center=tuple(float(v) for v in item["center"]),
            radius=float(item["radius"]),
            through=bool(item.get("through", True)),
        ))
    return holes


def voxelize(mesh: TriangleMesh, resolution: int):
    """Solid voxel grid over the mesh bounding box via per-column ray parity.

    Returns (mask[res, res, res] indexed [ix, iy, iz], origin, cell sizes).
    A voxel center is inside when an odd number of boundary crossings lies
    below it along z.
    """
    if not (mesh.is_closed and mesh.is_consistently_oriented):
        raise OpenMesh("voxelization needs a closed, oriented mesh")
    lo, hi = mesh.bounds
    extent = hi - lo
    cell = extent / resolution
    if not np.all(cell > 0):
        raise InvariantViolation("mesh bounding box is degenerate")
    centers = [lo[k] + (np.arange(resolution) + 0.5) * cell[k] for k in range(3)]
    X, Y = np.meshgrid(centers[0], centers[1], indexing="ij")
    tree = Bvh.from_mesh(mesh)
    tol = 1e-9 * max(1.0, float(extent[2]))
    offsets, zs = merged_line_hits(tree, X.ravel(), Y.ravel(), tol)
    mask = np.zeros((resolution, resolution, resolution), dtype=bool)
    zc = centers[2]
    flat = mask.reshape(-1, resolution)
    for col in range(offsets.shape[0] - 1):
        h = zs[offsets[col]:offsets[col + 1]]
        if h.size:
            below = np.searchsorted(h, zc, side="left")
            flat[col] = (below % 2) == 1
    return mask, lo, cell


def _carve_cylinders(mask, origin, cell, holes):
    res = mask.shape[0]
    centers = [origin[k] + (np.arange(res) + 0.5) * cell[k] for k in range(3)]
    cleared = np.zeros_like(mask)
    for hole in holes:
        ax = _AXIS_INDEX[hole.axis]
        if hole.radius < min(cell[k] for k in range(3) if k != ax):
            raise DegenerateHole(
                f"radius {hole.radius:g} below one voxel at resolution {res}"
            )
        u, v = [k for k in range(3) if k != ax]
        U = centers[u][:, None] - hole.center[u]
        V = centers[v][None, :] - hole.center[v]
        disc = (U ** 2 + V ** 2) <= hole.radius ** 2
        shape = [1, 1, 1]
        shape[u], shape[v] = disc.shape
        cleared |= np.broadcast_to(disc.reshape(shape), mask.shape)
    return mask & ~cleared


def _extract_surface(mask, origin, cell) -> TriangleMesh:
    """Blocky boundary surface between solid and empty voxels.

    Corner coordinates are kept on a doubled integer lattice so that the
    midpoint split used to separate diagonal voxel contacts stays exact.
    Faces between a solid and an empty voxel are emitted once, wound so their
    normal points out of the solid.
    """
    res = np.array(mask.shape)
    padded = np.pad(mask, 1)
    quads = []   # (owner voxel flat id, 4 corner lattice points)
    for ax in range(3):
        u, v = [(1, 2), (0, 2), (0, 1)][ax]
        lead = [slice(None)] * 3
        trail = [slice(None)] * 3
        lead[ax] = slice(1, None)
        trail[ax] = slice(None, -1)
        solid = padded[tuple(trail)]
        beyond = padded[tuple(lead)]
        for sign, face_of_solid in ((1, solid & ~beyond), (-1, beyond & ~solid)):
            idx = np.argwhere(face_of_solid)
            if idx.size == 0:
                continue
            # owner voxel in unpadded coordinates: the solid cell of the pair
            owner = idx - 1
            if sign < 0:
                owner = owner.copy()
                owner[:, ax] += 1
            corners = _face_corners(idx, ax, u, v, sign)
            flat_owner = np.ravel_multi_index(
                np.clip(owner, 0, res - 1).T, mask.shape
            )
            quads.append((flat_owner, corners))

    all_owner = np.concatenate([q[0] for q in quads])
    all_corners = np.concatenate([q[1] for q in quads])  # (n, 4, 3) doubled lattice ints

    tris = _triangulate_quads(all_owner, all_corners)
    # doubled-lattice integers -> world coordinates
    pts = origin[None, :] + tris.reshape(-1, 3).astype(np.float64) * (cell[None, :] / 2.0)
    return TriangleMesh.build(pts, np.arange(pts.shape[0]).reshape(-1, 3))


def _face_corners(idx, ax, u, v, sign):
    """Quad corners on the doubled lattice for faces at padded indices `idx`.

    Winding is counter-clockwise seen from the `sign` side of axis `ax`.
    """
    n = idx.shape[0]
    base = np.zeros((n, 3), dtype=np.int64)
    # unpadded lattice coordinate of the face plane along ax is idx[ax] - 1 + 1
    base[:, ax] = idx[:, ax]
    base[:, u] = idx[:, u] - 1
    base[:, v] = idx[:, v] - 1
    du = np.zeros(3, dtype=np.int64)
    dv = np.zeros(3, dtype=np.int64)
    du[u] = 1
    dv[v] = 1
    c0 = base
    c1 = base + du
    c2 = base + du + dv
    c3 = base + dv
    if ((ax == 1) != (sign > 0)):  # +y faces need the opposite cycle for CCW
        order = (c0, c1, c2, c3)
    else:
        order = (c0, c3, c2, c1)
    return 2 * np.stack(order, axis=1)


def _triangulate_quads(owners, corners) -> np.ndarray:
    """Quads -> triangles, splitting edges shared by four faces.

    An edge shared by four quads means two diagonally touching voxels; the
    pair of faces belonging to the smaller owner id gets that edge split at
    its (lattice-exact) midpoint so every edge ends up on exactly two
    triangles.
    """
    n = corners.shape[0]
    edges = np.concatenate([corners[:, [0, 1]], corners[:, [1, 2]],
                            corners[:, [2, 3]], corners[:, [3, 0]]])
    span = int(corners.max()) + 2
    enc = (edges[..., 0] * span + edges[..., 1]) * span + edges[..., 2]
    keys = np.stack([np.minimum(enc[:, 0], enc[:, 1]),
                     np.maximum(enc[:, 0], enc[:, 1])], axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                   return_counts=True)
    inverse = inverse.reshape(4, n)
    split_for: set[tuple[int, int]] = set()
    for e in np.nonzero(counts > 2)[0]:
        members = np.nonzero((inverse == e).any(axis=0))[0]
        owner_ids = owners[members]
        split_owner = owner_ids.min()
        for q in members[owner_ids == split_owner]:
            side = int(np.nonzero(inverse[:, q] == e)[0][0])
            split_for.add((int(q), side))

    simple = np.ones(n, dtype=bool)
    for q, _side in split_for:
        simple[q] = False
    tris = []
    cs = corners[simple]
    if cs.shape[0]:
        tris.append(np.concatenate([cs[:, [0, 1, 2]], cs[:, [0, 2, 3]]]))
    for q in np.nonzero(~simple)[0]:
        loop: list[np.ndarray] = []
        for side in range(4):
            a = corners[q, side]
            loop.append(a)
            if (int(q), side) in split_for:
                b = corners[q, (side + 1) % 4]
                loop.append((a + b) // 2)
        fan = [[loop[0], loop[k], loop[k + 1]] for k in range(1, len(loop) - 1)]
        tris.append(np.asarray(fan))
    return np.concatenate(tris)


def subtract_holes(mesh: TriangleMesh, holes: list[Cylinder],
                   resolution: int = 128) -> TriangleMesh:
    """Remove through-cylinders from a closed solid at voxel accuracy.

    The output volume equals (solid voxels after clearing) * voxel volume
    exactly up to float rounding; with an empty or non-intersecting hole list
    the voxelized volume is preserved.
    """
    mask, origin, cell = voxelize(mesh, resolution)
    if holes:
        mask = _carve_cylinders(mask, origin, cell, holes)
    if not mask.any():
        raise AllEmpty("no solid voxels remain after hole subtraction")
    return _extract_surface(mask, origin, cell)


def voxel_volume(mask: np.ndarray, cell) -> float:
    return float(mask.sum()) * float(np.prod(cell))
