"""Exception hierarchy shared across the package.

Every domain error derives from MoldgenError so callers (notably the CLI)
can distinguish data problems (exit code 2) from usage problems (exit 1).
"""


class MoldgenError(Exception):
    """Base class for all domain errors raised by this package."""


# -- grids / serialization ------------------------------------------------

class MismatchedSpecs(MoldgenError):
    """Two grids that must share a GridSpec do not."""


class NonFiniteValue(MoldgenError):
    """NaN or Inf where only finite values are allowed."""


class IoFailure(MoldgenError):
    """File could not be read or written."""


class BadMagic(MoldgenError):
    """Stream does not start with the expected magic bytes."""


class UnsupportedVersion(MoldgenError):
    """Format version is newer than this implementation understands."""


class TruncatedPayload(MoldgenError):
    """Stream ends before the payload promised by its header."""


class InvariantViolation(MoldgenError):
    """Decoded or constructed data breaks a documented invariant."""


# -- meshes ----------------------------------------------------------------

class ParseError(MoldgenError):
    """Mesh file could not be parsed.  Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyMesh(MoldgenError):
    """Mesh has no triangles."""


class OpenMesh(MoldgenError):
    """Operation requires a closed, consistently oriented mesh."""


# -- scanning / reconstruction ---------------------------------------------

class OutOfSlab(MoldgenError):
    """Mesh extends beyond the z range between the scan planes."""


class OneSidedMiss(MoldgenError):
    """Pixel where exactly one of the two depth images is a miss."""


class NoSolidPixels(MoldgenError):
    """Depth pair contains no material."""


class InvertedColumn(MoldgenError):
    """Top surface lies below the bottom surface; input is corrupt."""


# -- edges -------------------------------------------------------------------

class BadThresholds(MoldgenError):
    """Hysteresis thresholds must satisfy 0 < low < high."""


# -- diffusion ---------------------------------------------------------------

class BadRange(MoldgenError):
    """Schedule parameters outside their valid range."""


class StepOutOfRange(MoldgenError):
    """Diffusion step index t outside [1, T]."""


class ShapeMismatch(MoldgenError):
    """Tensor shape differs from what the operation requires."""


class EmptyDataset(MoldgenError):
    """Training requires at least one sample."""


class NonFiniteLoss(MoldgenError):
    """Training loss diverged to NaN or Inf."""


# -- postprocess / dataset ----------------------------------------------------

class AllEmpty(MoldgenError):
    """Cleaning removed every solid pixel."""


class DegenerateHole(MoldgenError):
    """Hole radius smaller than one voxel at the chosen resolution."""


class EmptyOutput(MoldgenError):
    """Packing produced no samples."""
