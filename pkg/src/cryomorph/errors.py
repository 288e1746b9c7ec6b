"""Exception hierarchy.

Every error raised on purpose by the package derives from ``CryomorphError``
so the CLI can report it on a single line.
"""


class CryomorphError(ValueError):
    pass


# volume-core
class HermitianViolation(CryomorphError):
    pass


class ResolutionBelowNyquist(CryomorphError):
    pass


class InvalidTargetSize(CryomorphError):
    pass


class ZeroVariance(CryomorphError):
    pass


class InvalidRadius(CryomorphError):
    pass


class ShapeMismatch(CryomorphError):
    pass


# se3
class DegenerateFrame(CryomorphError):
    pass


# forward-sim
class UnsupportedKind(CryomorphError):
    pass


# trainer
class NonFiniteLoss(CryomorphError):
    pass


# morphology-infer
class DegenerateData(CryomorphError):
    pass


class EmptyClass(CryomorphError):
    pass


# metrics
class LengthMismatch(CryomorphError):
    pass


class NonFinite(CryomorphError):
    pass


class LabelOutOfRange(CryomorphError):
    pass


class DegenerateLabels(CryomorphError):
    pass


# io
class UnsupportedMode(CryomorphError):
    pass


class CorruptHeader(CryomorphError):
    pass


class TruncatedData(CryomorphError):
    pass


class SidecarMissing(CryomorphError):
    pass


class SizeMismatch(CryomorphError):
    pass


class ConfigError(CryomorphError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
