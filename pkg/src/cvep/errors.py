"""Exception hierarchy shared by every module."""


class CvepError(Exception):
    """Base class for all errors raised by this package."""


# codebook
class AllZeroStateError(CvepError, ValueError):
    pass


class NonMaximalPeriodError(CvepError, ValueError):
    pass


class ShiftCollisionError(CvepError, ValueError):
    pass


# dsp
class InvalidBandError(CvepError, ValueError):
    pass


class RateMismatchError(CvepError, ValueError):
    pass


class TrialOutOfBoundsError(CvepError, IndexError):
    def __init__(self, event_index: int, message: str = ""):
        self.event_index = event_index
        super().__init__(message or f"event {event_index} extends past the end of the recording")


class MixedLabelGroupError(CvepError, ValueError):
    pass


class IndivisibleBatchError(CvepError, ValueError):
    pass


class NonReferenceLabelError(CvepError, ValueError):
    pass


# encoder / head
class ChannelMismatchError(CvepError, ValueError):
    pass


class ShapeError(CvepError, ValueError):
    pass


class FormatError(CvepError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class VersionMismatchError(FormatError):
    pass


class LabelOutOfRangeError(CvepError, ValueError):
    pass


class EmptySplitError(CvepError, ValueError):
    pass


# protocols
class SingleSubjectError(CvepError, ValueError):
    pass


class MissingCheckpointError(CvepError, KeyError):
    pass


class FractionOverflowError(CvepError, ValueError):
    pass


class EmptyTestSetError(CvepError, ValueError):
    pass


# baseline
class MissingClassError(CvepError, ValueError):
    def __init__(self, missing):
        self.missing = sorted(int(m) for m in missing)
        super().__init__(f"no trials for classes {self.missing}")


class SingularCovarianceError(CvepError, ValueError):
    pass


# synth / cli
class InvalidSpecError(CvepError, ValueError):
    pass


class ConfigError(CvepError, ValueError):
    pass
