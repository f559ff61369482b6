"""Exception hierarchy. Every operational failure raises a DarkforgeError
subclass so the CLI can map them to exit code 1."""


class DarkforgeError(Exception):
    pass


# --- container / file format ---

class MagicMismatch(DarkforgeError):
    pass


class TruncatedPayload(DarkforgeError):
    pass


class OddDimensions(DarkforgeError):
    pass


class IoFailure(DarkforgeError):
    pass


class MissingFile(DarkforgeError):
    pass


# --- geometry / frame contracts ---

class PhaseViolation(DarkforgeError):
    pass


class OutOfBounds(DarkforgeError):
    pass


class NonPositiveGain(DarkforgeError):
    pass


class WrongEncoding(DarkforgeError):
    pass


class ShapeMismatch(DarkforgeError):
    pass


class EmptyFrame(DarkforgeError):
    pass


# --- illumination matching ---

class ZeroExposureInput(DarkforgeError):
    pass


class BinMismatch(DarkforgeError):
    pass


class SearchDiverged(DarkforgeError):
    pass


# --- noise calibration / injection ---

class InsufficientFrames(DarkforgeError):
    pass


class DegenerateVariance(DarkforgeError):
    pass


class SingleIsoPoint(DarkforgeError):
    pass


class EmptyDarkBank(DarkforgeError):
    pass


class NegativeIso(DarkforgeError):
    pass


# --- dataset build ---

class AllEntriesFailed(DarkforgeError):
    pass


class EmptyManifest(DarkforgeError):
    pass


# --- diffusion ---

class InvalidRange(DarkforgeError):
    pass


class StepOutOfRange(DarkforgeError):
    pass


class StepOrderViolation(DarkforgeError):
    pass


class SingularCovariance(DarkforgeError):
    pass


# --- losses / operators ---

class ChannelMismatch(DarkforgeError):
    pass


class MissingPart(DarkforgeError):
    pass


class NonFiniteValue(DarkforgeError):
    pass


class TooSmall(DarkforgeError):
    pass


class KlAboveThreshold(UserWarning):
    """Warning (not an error): a synthesized pair exceeded the target KL."""


class SaturationWarning(UserWarning):
    """Warning: exposure alignment drove >1% of samples into clamp saturation."""
