"""Exception hierarchy for the toolkit.

Errors are grouped into families so the CLI can map them onto stable exit
codes: parse errors (bad input files), geometry errors (solver failures),
data errors (grids/depths that cannot be combined), and curation errors.
"""


class SatGeomError(Exception):
    """Base class for all toolkit errors."""


# --- file parsing ---------------------------------------------------------

class ParseError(SatGeomError):
    """Malformed input file (RPC text, IMD, PFM, DSM grid, config)."""


class MissingKey(ParseError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"required key missing: {name}")


class NonPositiveScale(ParseError):
    def __init__(self, name, value):
        self.name = name
        self.value = value
        super().__init__(f"{name} must be > 0, got {value!r}")


class MalformedNumber(ParseError):
    def __init__(self, line_no, text):
        self.line_no = line_no
        super().__init__(f"line {line_no}: cannot parse number from {text!r}")


class NonUnitDenominator(ParseError):
    """First denominator coefficient must be exactly 1 (standard normalization)."""

    def __init__(self, name, value):
        self.name = name
        super().__init__(f"{name}[0] must equal 1 exactly, got {value!r}")


class NoTimestampKey(ParseError):
    def __init__(self, keys):
        super().__init__(f"no timestamp key found (looked for {', '.join(keys)})")


class MalformedTimestamp(ParseError):
    def __init__(self, value):
        super().__init__(f"cannot parse timestamp {value!r}")


# --- geometry / solvers ---------------------------------------------------

class GeometryError(SatGeomError):
    """Numerical failure in a geometric solver."""


class DenominatorNearZero(GeometryError):
    """Rational polynomial denominator vanished: degenerate model or far extrapolation."""


class NoConvergence(GeometryError):
    def __init__(self, iterations, residual_px):
        self.iterations = iterations
        self.residual_px = residual_px
        super().__init__(
            f"image-to-ground solve did not converge after {iterations} iterations "
            f"(residual {residual_px:.3g} px)"
        )


class OutOfFrame(GeometryError):
    """Point too far from the local frame origin for the tangent-plane approximation."""


class RayExitsFootprint(GeometryError):
    """An imaging ray left the DSM footprint (or hit nodata) before intersecting."""


class NonPositiveMargin(GeometryError):
    """Near-plane margin must be strictly positive."""


class DepthOutOfBracket(GeometryError):
    """Requested slant range is not attainable within the altitude bracket."""


# --- data compatibility ---------------------------------------------------

class DataError(SatGeomError):
    """Inputs are structurally valid but cannot be combined as requested."""


class EmptyOutput(DataError):
    """An operation produced (almost) no valid pixels."""


class EmptyInput(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class InsufficientOverlap(DataError):
    """Too few views or too few mutually visible samples to align."""


class GridMismatch(DataError):
    pass


class NoOverlap(DataError):
    """Zero mutually valid cells between two grids."""


# --- curation -------------------------------------------------------------

class CurationError(SatGeomError):
    pass


class NoAltitudeSource(CurationError):
    def __init__(self, scene_id):
        self.scene_id = scene_id
        super().__init__(
            f"scene {scene_id}: no altitude bounds (no metadata file and no GT DSM)"
        )
