"""Exception hierarchy shared by every module.

Exit codes used by the command line live on the classes so the CLI can map
any raised error without a lookup table.
"""


class SegcalError(Exception):
    exit_code = 1


class InputError(SegcalError, ValueError):
    exit_code = 2


class NonPositiveTemperature(InputError):
    pass


class NonFiniteInput(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class EmptyInput(InputError):
    pass


class InvalidBounds(InputError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class EmptyEnsemble(InputError):
    pass


class ClassCountMismatch(DimensionMismatch):
    exit_code = 4


class DegenerateData(SegcalError):
    exit_code = 3


class AllPixelsIgnored(DegenerateData):
    def __init__(self, image_id=None):
        self.image_id = image_id
        where = "" if image_id is None else f" in image {image_id}"
        super().__init__(f"every pixel is ignored{where}")


class EmptyDataset(DegenerateData):
    pass


class DegenerateLabels(DegenerateData):
    pass


class SplitMissing(DegenerateData):
    pass


class EmptySplit(DegenerateData):
    pass


class NonFiniteGradient(SegcalError, FloatingPointError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite gradient at optimizer step {step}")


class FormatError(SegcalError):
    exit_code = 4


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedPayload(FormatError):
    def __init__(self, offset, needed):
        self.offset = offset
        super().__init__(f"payload truncated at byte offset {offset} ({needed} more bytes expected)")


class TrailingBytes(FormatError):
    def __init__(self, offset, extra):
        self.offset = offset
        super().__init__(f"{extra} unexpected trailing bytes after offset {offset}")
