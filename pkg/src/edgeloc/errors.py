"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError -> 1, ValidationError (and subclasses)
-> 2, NoEstimateError -> 3. Everything else is a plain bug.
"""

from __future__ import annotations


class EdgeLocError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigError(EdgeLocError):
    """Bad configuration file, key, or value."""


class ValidationError(EdgeLocError):
    """Input data violates a documented schema or invariant."""


class GraphFormatError(ValidationError):
    """Graph file fails schema validation (missing field, range, ordering)."""


class DanglingReferenceError(GraphFormatError):
    """Graph entity references an id that does not exist."""


class UnknownIdError(ValidationError):
    """Lookup of a node, edge, or query id that is not present."""


class OutOfRegionError(ValidationError):
    """Coordinate outside the small-region envelope of the local frame."""


class DegenerateGeometryError(EdgeLocError):
    """Geometric operation has no defined answer (coincident points, ...)."""


class BehindCameraError(DegenerateGeometryError):
    """Projection requested for a point with non-positive camera depth."""


class TooFewCorrespondencesError(ValidationError):
    """Solver needs more 3D-2D pairs than were supplied."""


class DegenerateSolutionError(EdgeLocError):
    """Robust solve finished without a usable consensus."""


class InsufficientOverlapError(EdgeLocError):
    """Image pair shares fewer landmarks than the configured minimum."""


class NoEstimateError(EdgeLocError):
    """Localisation produced no pose at all; diagnostics in args."""
