"""Exception hierarchy shared by every stage of the pipeline."""


class CoughScreenError(Exception):
    """Base class for all pipeline errors."""


# audio_io
class AudioError(CoughScreenError):
    pass


class NotWav(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class TruncatedFile(AudioError):
    pass


class IoFailure(AudioError):
    pass


class ConverterFailed(AudioError):
    pass


class ConverterMissing(AudioError):
    pass


# preprocessing / gating
class SilentAudio(CoughScreenError):
    pass


class NoCoughDetected(CoughScreenError):
    pass


class SingleClass(CoughScreenError):
    """Training or evaluation data contains only one class."""


# model
class ShapeMismatch(CoughScreenError):
    pass


class DivergedLoss(CoughScreenError):
    pass


class EmptyScores(CoughScreenError):
    pass


class BundleError(CoughScreenError):
    pass


class BadMagic(BundleError):
    pass


class VersionUnsupported(BundleError):
    pass


class WeightCountMismatch(BundleError):
    pass


# dataset
class ManifestError(CoughScreenError):
    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class MalformedLine(ManifestError):
    def __init__(self, line_no, detail=""):
        msg = f"line {line_no}: malformed record"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, line_no)


class MissingField(ManifestError):
    def __init__(self, field, line_no):
        super().__init__(f"line {line_no}: missing field {field!r}", line_no)
        self.field = field


class TooFewIndividuals(CoughScreenError):
    pass


# evaluation
class LengthMismatch(CoughScreenError):
    pass


class EmptyInput(CoughScreenError):
    pass


class EmptyGroup(CoughScreenError):
    pass
