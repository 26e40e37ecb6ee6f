"""Exception taxonomy shared across the package."""


class SphereSigError(Exception):
    """Base class for all package-specific errors."""


class InvalidScheme(SphereSigError):
    pass


class TooFewPoints(SphereSigError):
    pass


class InvalidModel(SphereSigError):
    pass


class ShapeMismatch(SphereSigError):
    pass


class GeometryMismatch(SphereSigError):
    pass


class EmptyInput(SphereSigError):
    pass


class GraphMismatch(SphereSigError):
    pass


class DegenerateDirection(SphereSigError):
    pass


class RadiusExceeded(SphereSigError):
    pass


class DegreeOutOfRange(SphereSigError):
    pass


class PartialCoverage(SphereSigError):
    pass


class BadMagic(SphereSigError):
    pass


class TruncatedStream(SphereSigError):
    pass


class NonFiniteGradient(SphereSigError):
    pass


class UntrainableLayer(SphereSigError):
    pass


class InvalidFactor(SphereSigError):
    pass


class EmptyDenseSet(SphereSigError):
    pass


class EmptyClassSet(SphereSigError):
    pass


class FormatError(SphereSigError):
    pass
