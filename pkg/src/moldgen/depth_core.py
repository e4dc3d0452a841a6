"""Core value types: scan grids, depth images, multi-channel samples, DGRD codec.

Conventions
-----------
A GridSpec describes a w x h pixel grid in the xy plane plus two horizontal
planes (z_top above z_bottom) bounding the scan slab.  Depth images store, per
pixel, the distance from their own plane to the first surface along z; pixels
whose ray hit nothing carry exactly ``gap = z_top - z_bottom`` (the miss
sentinel, i.e. "no material in this column").

Arrays are row-major with shape (height, width); element [j, i] belongs to the
pixel whose world center is (x_min + (i+0.5)*cell, y_min + (j+0.5)*cell).
Geometry is float64 in memory; the on-disk DGRD payload is float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    IoFailure,
    MismatchedSpecs,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedVersion,
)

DGRD_MAGIC = b"DGRD"
DGRD_VERSION = 1
_HEADER = struct.Struct("<4s5I")  # magic, version, width, height, channels, flags
_FLAG_SIDECAR = 1

# Relative tolerance for classifying a depth as the miss sentinel and for the
# depth-range validity check.  Must exceed one float32 ulp of the gap so that
# values round-tripped through the 32-bit disk format still classify the same.
MISS_REL_TOL = 1e-6


class Side(Enum):
    TOP = "top"
    BOTTOM = "bottom"


class Norm(Enum):
    RAW = "raw"            # depth units; edge channel in {0, 1}
    UNIT_RANGE = "unit"    # depths divided by gap -> [0, 1]
    SYMMETRIC = "symmetric"  # 2*unit - 1 -> [-1, 1], the diffusion input form


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the scan grid and the top/bottom plane slab."""

    width: int
    height: int
    x_min: float
    y_min: float
    cell_size: float
    z_top: float = 0.4
    z_bottom: float = -0.4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("grid must be at least 1x1")
        if not self.cell_size > 0:
            raise InvariantViolation("cell_size must be positive")
        if not self.z_top > self.z_bottom:
            raise InvariantViolation("z_top must exceed z_bottom")

    @classmethod
    def square(cls, resolution: int = 256, extent: float = 1.0,
               z_top: float = 0.4, z_bottom: float = -0.4) -> "GridSpec":
        """Centered square grid of `resolution` pixels spanning `extent` world units."""
        return cls(
            width=resolution,
            height=resolution,
            x_min=-extent / 2.0,
            y_min=-extent / 2.0,
            cell_size=extent / resolution,
            z_top=z_top,
            z_bottom=z_bottom,
        )

    @property
    def gap(self) -> float:
        return self.z_top - self.z_bottom

    def pixel_centers(self):
        """World coordinates of pixel centers: (xs of length width, ys of length height)."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell_size
        return xs, ys

    def grid_lines(self):
        """World coordinates of pixel boundaries: (width+1 xs, height+1 ys)."""
        xs = self.x_min + np.arange(self.width + 1) * self.cell_size
        ys = self.y_min + np.arange(self.height + 1) * self.cell_size
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "cell_size": self.cell_size,
            "z_top": self.z_top,
            "z_bottom": self.z_bottom,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            x_min=float(d["x_min"]),
            y_min=float(d["y_min"]),
            cell_size=float(d["cell_size"]),
            z_top=float(d["z_top"]),
            z_bottom=float(d["z_bottom"]),
        )


def default_spec() -> GridSpec:
    """256x256 grid on planes z = +-0.4, spanning [-0.5, 0.5]^2 in the plane."""
    return GridSpec.square(256)


def _validated_grid(data, spec: GridSpec, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape != (spec.height, spec.width):
        raise InvariantViolation(
            f"{what} shape {arr.shape} does not match grid "
            f"({spec.height}, {spec.width})"
        )
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{what} contains NaN or Inf")
    tol = MISS_REL_TOL * spec.gap
    if arr.min() < -tol or arr.max() > spec.gap + tol:
        raise InvariantViolation(
            f"{what} has depths outside [0, gap]: "
            f"min {arr.min()!r}, max {arr.max()!r}, gap {spec.gap!r}"
        )
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel distance from one plane to the first surface along z.

    Depth is measured from the image's own plane toward the other one: the top
    image stores z_top - z_hit, the bottom image z_hit - z_bottom.  Misses
    carry exactly `gap`.
    """

    spec: GridSpec
    side: Side
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validated_grid(self.data, self.spec, "depth image"))

    @classmethod
    def full_miss(cls, spec: GridSpec, side: Side) -> "DepthImage":
        return cls(spec, side, np.full((spec.height, spec.width), spec.gap))

    def miss_mask(self) -> np.ndarray:
        """Boolean mask of pixels whose ray hit nothing."""
        return self.data >= self.spec.gap * (1.0 - MISS_REL_TOL)


@dataclass(frozen=True)
class DepthPair:
    """Top and bottom depth images over one shared grid."""

    top: DepthImage
    bottom: DepthImage

    def __post_init__(self):
        if self.top.spec != self.bottom.spec:
            raise MismatchedSpecs("top and bottom images use different grids")
        if self.top.side is not Side.TOP or self.bottom.side is not Side.BOTTOM:
            raise InvariantViolation("pair sides must be (TOP, BOTTOM)")

    @property
    def spec(self) -> GridSpec:
        return self.top.spec

    def thickness(self) -> np.ndarray:
        return pair_thickness(self)

    def solid_mask(self, eps_thick: float | None = None) -> np.ndarray:
        """Pixels whose material column is thicker than eps_thick (default 1e-6 * gap)."""
        if eps_thick is None:
            eps_thick = MISS_REL_TOL * self.spec.gap
        gap = self.spec.gap
        return (gap - self.top.data - self.bottom.data) > eps_thick


def pair_thickness(pair: DepthPair) -> np.ndarray:
    """Column thickness gap - top - bottom, clamped at 0 for non-solid pixels."""
    if pair.top.spec != pair.bottom.spec:
        raise MismatchedSpecs("top and bottom images use different grids")
    t = pair.spec.gap - pair.top.data - pair.bottom.data
    return np.maximum(t, 0.0)


_CHANNELS = ("top", "bottom", "edge")


@dataclass(frozen=True)
class DepthSample:
    """3 x height x width float tensor (channels: top, bottom, edge)."""

    data: np.ndarray
    norm: Norm
    spec: GridSpec | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise InvariantViolation(f"sample must be (3, h, w), got {arr.shape}")
        if self.spec is not None and arr.shape[1:] != (self.spec.height, self.spec.width):
            raise InvariantViolation("sample shape does not match its grid")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("sample contains NaN or Inf")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def top(self) -> np.ndarray:
        return self.data[0]

    @property
    def bottom(self) -> np.ndarray:
        return self.data[1]

    @property
    def edge(self) -> np.ndarray:
        return self.data[2]

    def to_norm(self, norm: Norm, spec: GridSpec | None = None) -> "DepthSample":
        """Convert between Raw / UnitRange / Symmetric representations.

        Raw <-> UnitRange rescales the two depth channels by the slab gap and
        leaves the edge channel alone; UnitRange <-> Symmetric applies
        2u - 1 to the whole tensor.  Conversions invert each other to within a
        few float64 ulps of the representation scale.
        """
        spec = spec or self.spec
        if norm is self.norm:
            return self
        unit = self._to_unit(spec)
        if norm is Norm.UNIT_RANGE:
            return unit
        if norm is Norm.SYMMETRIC:
            return DepthSample(2.0 * unit.data - 1.0, Norm.SYMMETRIC, spec=unit.spec)
        # RAW
        if spec is None:
            raise InvariantViolation("raw conversion needs a GridSpec for the gap")
        data = unit.data.copy()
        data[0] *= spec.gap
        data[1] *= spec.gap
        return DepthSample(data, Norm.RAW, spec=spec)

    def _to_unit(self, spec: GridSpec | None) -> "DepthSample":
        if self.norm is Norm.UNIT_RANGE:
            return self if spec is self.spec else replace(self, spec=spec)
        if self.norm is Norm.SYMMETRIC:
            return DepthSample((self.data + 1.0) / 2.0, Norm.UNIT_RANGE, spec=spec)
        if spec is None:
            raise InvariantViolation("raw conversion needs a GridSpec for the gap")
        data = self.data.copy()
        data[0] /= spec.gap
        data[1] /= spec.gap
        return DepthSample(data, Norm.UNIT_RANGE, spec=spec)


def sample_from_pair(pair: DepthPair, edge: np.ndarray | None = None,
                     norm: Norm = Norm.RAW) -> DepthSample:
    """Stack a pair (plus an optional binary edge channel) into a DepthSample."""
    if edge is None:
        edge = np.zeros((pair.spec.height, pair.spec.width))
    raw = DepthSample(
        np.stack([pair.top.data, pair.bottom.data, np.asarray(edge, dtype=np.float64)]),
        Norm.RAW,
        spec=pair.spec,
    )
    return raw.to_norm(norm)


def pair_from_sample(sample: DepthSample, spec: GridSpec | None = None) -> DepthPair:
    """Split a sample back into a DepthPair (edge channel is dropped)."""
    spec = spec or sample.spec
    if spec is None:
        raise InvariantViolation("cannot rebuild a pair without a GridSpec")
    raw = sample.to_norm(Norm.RAW, spec=spec)
    return DepthPair(
        top=DepthImage(spec, Side.TOP, raw.data[0]),
        bottom=DepthImage(spec, Side.BOTTOM, raw.data[1]),
    )


# ---------------------------------------------------------------------------
# DGRD binary format
#
# magic "DGRD" | version u32 | width u32 | height u32 | channels u32 |
# flags u32 (bit0: sidecar present) | payload: channels*height*width float32,
# all little-endian, channel-major then row-major.  Metadata that does not fit
# the fixed header (grid spec, side, norm) lives in a JSON sidecar named
# <file>.json next to the main file.
# ---------------------------------------------------------------------------


def encode_grid_bytes(obj: DepthImage | DepthSample, flags: int = 0) -> bytes:
    """Serialize one grid to DGRD bytes (header + float32 payload)."""
    if isinstance(obj, DepthImage):
        channels, h, w = 1, obj.spec.height, obj.spec.width
        payload_arr = obj.data[np.newaxis]
    elif isinstance(obj, DepthSample):
        channels = 3
        h, w = obj.data.shape[1:]
        payload_arr = obj.data
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    if not np.all(np.isfinite(payload_arr)):
        raise NonFiniteValue("refusing to encode NaN/Inf values")
    header = _HEADER.pack(DGRD_MAGIC, DGRD_VERSION, w, h, channels, flags)
    payload = np.ascontiguousarray(payload_arr, dtype="<f4").tobytes()
    return header + payload


def _sidecar_dict(obj: DepthImage | DepthSample) -> dict:
    if isinstance(obj, DepthImage):
        return {"kind": "image", "side": obj.side.value, "grid": obj.spec.to_dict()}
    d = {"kind": "sample", "norm": obj.norm.value}
    if obj.spec is not None:
        d["grid"] = obj.spec.to_dict()
    return d


def encode_grid(obj: DepthImage | DepthSample, sink) -> int:
    """Write `obj` to `sink` (a path) as DGRD plus a JSON sidecar.

    Returns the number of bytes written to the main file.  The sidecar is
    named <sink>.json and holds the GridSpec, side, and normalization; the
    header's flag bit 0 records its presence.
    """
    path = Path(sink)
    blob = encode_grid_bytes(obj, flags=_FLAG_SIDECAR)
    try:
        path.write_bytes(blob)
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(_sidecar_dict(obj), indent=1))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return len(blob)


def decode_grid_bytes(buf: bytes, *, spec: GridSpec | None = None,
                      side: Side = Side.TOP, norm: Norm = Norm.RAW):
    """Decode DGRD bytes.  Returns (DepthImage | DepthSample, flags, consumed)."""
    if len(buf) < 4 or buf[:4] != DGRD_MAGIC:
        raise BadMagic(f"expected DGRD magic, got {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayload("stream shorter than the DGRD header")
    _, version, w, h, channels, flags = _HEADER.unpack_from(buf)
    if version != DGRD_VERSION:
        raise UnsupportedVersion(f"DGRD version {version} not supported")
    if channels not in (1, 3):
        raise InvariantViolation(f"unsupported channel count {channels}")
    if w < 1 or h < 1:
        raise InvariantViolation("zero-sized grid")
    need = channels * h * w * 4
    end = _HEADER.size + need
    if len(buf) < end:
        raise TruncatedPayload(
            f"payload needs {need} bytes, only {len(buf) - _HEADER.size} present"
        )
    data = np.frombuffer(buf, dtype="<f4", count=channels * h * w,
                         offset=_HEADER.size).astype(np.float64)
    data = data.reshape(channels, h, w)
    if channels == 1:
        if spec is None:
            raise IoFailure("1-channel DGRD needs grid metadata (missing sidecar)")
        return DepthImage(spec, side, data[0]), flags, end
    return DepthSample(data, norm, spec=spec), flags, end


def decode_grid(source) -> DepthImage | DepthSample:
    """Read a DGRD file (and its sidecar, if flagged) back into an object."""
    path = Path(source)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(buf) >= _HEADER.size and buf[:4] == DGRD_MAGIC:
        flags = _HEADER.unpack_from(buf)[5]
    else:
        flags = 0
    spec = None
    side = Side.TOP
    norm = Norm.RAW
    if flags & _FLAG_SIDECAR:
        sidecar = path.with_name(path.name + ".json")
        try:
            meta = json.loads(sidecar.read_text())
        except OSError as exc:
            raise IoFailure(f"sidecar {sidecar} is flagged but unreadable: {exc}") from exc
        if "grid" in meta:
            spec = GridSpec.from_dict(meta["grid"])
        if "side" in meta:
            side = Side(meta["side"])
        if "norm" in meta:
            norm = Norm(meta["norm"])
    obj, _, _ = decode_grid_bytes(buf, spec=spec, side=side, norm=norm)
    return obj
