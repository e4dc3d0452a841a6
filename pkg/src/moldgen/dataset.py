"""Mesh ingestion: slab normalization, synthetic corpus, packed training sets.

The synthetic corpus stands in for a real part library at desk scale.  Every
member is generated directly as a pair of depth images (base plate plus
raised ribs and bosses) and meshed from them, so its exact DepthPair is known
analytically and scanning the mesh must reproduce it bit for bit at pixel
centers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_core import (
    DepthImage,
    DepthPair,
    DepthSample,
    GridSpec,
    Norm,
    Side,
    decode_grid_bytes,
    encode_grid_bytes,
)
from .edges import CannyParams, make_sample
from .errors import EmptyMesh, EmptyOutput, IoFailure, MoldgenError
from .mesh_io import TriangleMesh, box_mesh, load_mesh
from .reconstruct import ReconstructionMode, reconstruct_solid
from .scan import scan_mesh

log = logging.getLogger(__name__)


def normalize_mesh(mesh: TriangleMesh, spec: GridSpec,
                   margin: float = 0.05) -> tuple[TriangleMesh, float]:
    """Center a mesh in the slab and scale it uniformly to fit.

    The bounding box is scaled so it occupies at most (1 - 2*margin) of the
    grid extent in x/y and of the gap in z, then translated so its center
    coincides with the slab center.  Returns (mesh, scale factor).
    """
    if mesh.triangles.shape[0] == 0:
        raise EmptyMesh("cannot normalize an empty mesh")
    if not 0.0 <= margin < 0.5:
        raise ValueError(f"margin must be in [0, 0.5), got {margin}")
    lo, hi = mesh.bounds
    extent = hi - lo
    targets = np.array([
        spec.width * spec.cell_size,
        spec.height * spec.cell_size,
        spec.gap,
    ]) * (1.0 - 2.0 * margin)
    usable = extent > 0
    scale = float(np.min(targets[usable] / extent[usable])) if usable.any() else 1.0
    center = np.array([
        spec.x_min + spec.width * spec.cell_size / 2.0,
        spec.y_min + spec.height * spec.cell_size / 2.0,
        (spec.z_top + spec.z_bottom) / 2.0,
    ])
    offset = center - (lo + hi) / 2.0 * scale
    return mesh.transformed(scale=scale, offset=offset), scale


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _disc_mask(spec: GridSpec, cx, cy, r):
    xs, ys = spec.pixel_centers()
    return (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r ** 2


def _synth_pair(rng: np.random.Generator, spec: GridSpec) -> DepthPair:
    """One bracket-like pair: plate, 1-4 top ribs, 0-2 bosses, optional pocket."""
    h, w = spec.height, spec.width
    gap = spec.gap
    top = np.full((h, w), gap)
    bottom = np.full((h, w), gap)

    # plate footprint with a safety border of one pixel
    i0 = rng.integers(1, max(2, w // 4))
    i1 = rng.integers(w - max(2, w // 4), w - 1) + 1
    j0 = rng.integers(1, max(2, h // 4))
    j1 = rng.integers(h - max(2, h // 4), h - 1) + 1
    plate = np.zeros((h, w), dtype=bool)
    plate[j0:j1, i0:i1] = True

    plate_top = gap * rng.uniform(0.30, 0.42)    # depth from the top plane
    plate_bottom = gap * rng.uniform(0.30, 0.42)
    top[plate] = plate_top
    bottom[plate] = plate_bottom

    for _ in range(rng.integers(1, 5)):  # ribs: raised strips on the top side
        if rng.random() < 0.5:
            ri0 = rng.integers(i0, max(i0 + 1, i1 - 2))
            ri1 = min(i1, ri0 + rng.integers(1, 4))
            rib = np.zeros((h, w), dtype=bool)
            rib[j0:j1, ri0:ri1] = True
        else:
            rj0 = rng.integers(j0, max(j0 + 1, j1 - 2))
            rj1 = min(j1, rj0 + rng.integers(1, 4))
            rib = np.zeros((h, w), dtype=bool)
            rib[rj0:rj1, i0:i1] = True
        raise_by = gap * rng.uniform(0.08, 0.2)
        top[rib & plate] = max(plate_top - raise_by, gap * 0.05)

    for _ in range(rng.integers(0, 3)):  # bosses: raised discs on the top side
        cx = rng.uniform(spec.x_min + (i0 + 2) * spec.cell_size,
                         spec.x_min + max(i0 + 3, i1 - 2) * spec.cell_size)
        cy = rng.uniform(spec.y_min + (j0 + 2) * spec.cell_size,
                         spec.y_min + max(j0 + 3, j1 - 2) * spec.cell_size)
        r = rng.uniform(2.5, max(3.0, min(w, h) / 6.0)) * spec.cell_size
        boss = _disc_mask(spec, cx, cy, r) & plate
        top[boss] = max(plate_top - gap * rng.uniform(0.1, 0.22), gap * 0.05)

    if rng.random() < 0.4:  # shallow pocket on the bottom side
        pi0 = rng.integers(i0 + 1, max(i0 + 2, i1 - 1))
        pi1 = min(i1 - 1, pi0 + rng.integers(2, max(3, (i1 - i0) // 2)))
        pj0 = rng.integers(j0 + 1, max(j0 + 2, j1 - 1))
        pj1 = min(j1 - 1, pj0 + rng.integers(2, max(3, (j1 - j0) // 2)))
        if pi1 > pi0 and pj1 > pj0:
            pocket = np.zeros((h, w), dtype=bool)
            pocket[pj0:pj1, pi0:pi1] = True
            deeper = min(plate_bottom + gap * 0.1, gap - plate_top - gap * 0.05)
            if deeper > plate_bottom:
                bottom[pocket] = deeper

    return DepthPair(
        top=DepthImage(spec, Side.TOP, top),
        bottom=DepthImage(spec, Side.BOTTOM, bottom),
    )


def synth_corpus_pairs(n: int, seed: int, spec: GridSpec) -> list[DepthPair]:
    """Ground-truth depth pairs of the synthetic corpus (deterministic in seed)."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    return [
        _synth_pair(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,))), spec)
        for k in range(n)
    ]


def synth_corpus(n: int, seed: int, spec: GridSpec) -> list[TriangleMesh]:
    """Deterministic family of heightfield-constructible bracket-like solids."""
    return [reconstruct_solid(p, ReconstructionMode.BLOCK)
            for p in synth_corpus_pairs(n, seed, spec)]


def attach_overhang(mesh: TriangleMesh, rng: np.random.Generator,
                    spec: GridSpec) -> TriangleMesh:
    """Glue a mushroom (stem plus wider cap) on top of a solid.

    The cap overhangs the stem, so the composite has an undercut when molded
    along z; scanning sees only the outermost surfaces, which is exactly what
    the reconstruction path is supposed to erase.
    """
    lo, hi = mesh.bounds
    top_z = hi[2]
    headroom = spec.z_top - top_z
    if headroom <= spec.gap * 0.05:
        return mesh
    cx = rng.uniform(lo[0] + 0.3 * (hi[0] - lo[0]), hi[0] - 0.3 * (hi[0] - lo[0]))
    cy = rng.uniform(lo[1] + 0.3 * (hi[1] - lo[1]), hi[1] - 0.3 * (hi[1] - lo[1]))
    stem_r = rng.uniform(0.02, 0.05) * (hi[0] - lo[0])
    cap_r = stem_r * rng.uniform(1.8, 2.6)
    stem_h = headroom * rng.uniform(0.3, 0.5)
    cap_h = headroom * rng.uniform(0.2, 0.4)
    stem = box_mesh(
        (cx - stem_r, cy - stem_r, top_z - spec.gap * 0.02),
        (cx + stem_r, cy + stem_r, top_z + stem_h),
    )
    cap = box_mesh(
        (cx - cap_r, cy - cap_r, top_z + stem_h),
        (cx + cap_r, cy + cap_r, top_z + stem_h + cap_h),
    )
    vertices = np.concatenate([mesh.vertices, stem.vertices, cap.vertices])
    triangles = np.concatenate([
        mesh.triangles,
        stem.triangles + len(mesh.vertices),
        cap.triangles + len(mesh.vertices) + len(stem.vertices),
    ])
    return TriangleMesh.build(vertices, triangles)


# ---------------------------------------------------------------------------
# Packed datasets
# ---------------------------------------------------------------------------

_MESH_SUFFIXES = {".stl", ".obj"}


@dataclass
class PackReport:
    out_path: str
    kept: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.kept)

    def to_dict(self) -> dict:
        return {
            "out_path": self.out_path,
            "count": self.count,
            "kept": self.kept,
            "skipped": self.skipped,
            "failed": [{"name": n, "reason": r} for n, r in self.failed],
        }


def load_manifest(source) -> dict:
    """Manifest JSON holding either a "keep" or a "skip" name list."""
    if source is None:
        return {}
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read manifest {source}: {exc}") from exc
    if "keep" in doc and "skip" in doc:
        raise ValueError("manifest must contain either 'keep' or 'skip', not both")
    return doc


def _manifest_keeps(manifest: dict, name: str, stem: str) -> bool:
    if "keep" in manifest:
        allowed = set(manifest["keep"])
        return name in allowed or stem in allowed
    if "skip" in manifest:
        banned = set(manifest["skip"])
        return name not in banned and stem not in banned
    return True


def pack_dataset(directory, spec: GridSpec, out_path, manifest=None,
                 canny: CannyParams = CannyParams(), margin: float = 0.05) -> PackReport:
    """Load, normalize, scan, and edge-augment every mesh in a directory.

    Files are processed in sorted name order; per-file failures are collected
    in the report instead of aborting the run.  The output is a count-prefixed
    concatenation of 3-channel DGRD records plus a JSON sidecar with the grid,
    normalization, and source names.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in _MESH_SUFFIXES)
    report = PackReport(out_path=str(out_path))
    records: list[bytes] = []
    manifest = load_manifest(manifest)
    for path in files:
        if not _manifest_keeps(manifest, path.name, path.stem):
            report.skipped.append(path.name)
            continue
        try:
            mesh = load_mesh(path)
            mesh, _ = normalize_mesh(mesh, spec, margin)
            pair = scan_mesh(mesh, spec)
            sample = make_sample(pair, canny)
            records.append(encode_grid_bytes(sample))
            report.kept.append(path.name)
        except (MoldgenError, OSError) as exc:
            report.failed.append((path.name, f"{type(exc).__name__}: {exc}"))
    if not records:
        raise EmptyOutput(f"nothing packed from {directory}")
    out_path = Path(out_path)
    try:
        blob = len(records).to_bytes(4, "little") + b"".join(records)
        out_path.write_bytes(blob)
        out_path.with_name(out_path.name + ".json").write_text(json.dumps({
            "grid": spec.to_dict(),
            "norm": Norm.UNIT_RANGE.value,
            "names": report.kept,
        }, indent=1))
    except OSError as exc:
        raise IoFailure(f"cannot write {out_path}: {exc}") from exc
    return report


def load_pack(path) -> tuple[list[DepthSample], dict]:
    """Read a packed dataset back into samples plus its sidecar metadata."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(buf) < 4:
        raise IoFailure(f"{path} is too short to be a pack file")
    count = int.from_bytes(buf[:4], "little")
    meta: dict = {}
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    spec = GridSpec.from_dict(meta["grid"]) if "grid" in meta else None
    norm = Norm(meta.get("norm", Norm.RAW.value))
    samples = []
    offset = 4
    for _ in range(count):
        obj, _, consumed = decode_grid_bytes(buf[offset:], spec=spec, norm=norm)
        samples.append(obj)
        offset += consumed
    return samples, meta
