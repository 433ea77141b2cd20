"""Exception types raised across the package."""


class DicomCEError(Exception):
    """Base class for all package errors."""


class UnrecognizedTransducer(DicomCEError, ValueError):
    pass


class UnknownStudyDescription(DicomCEError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TableFormatError(DicomCEError, ValueError):
    pass


class DegenerateImage(DicomCEError, ValueError):
    pass


class ShapeMismatch(DicomCEError, ValueError):
    pass


class IncompatibleShape(DicomCEError, ValueError):
    pass


class IncompatibleCheckpoint(DicomCEError, ValueError):
    pass


class NonFiniteLoss(DicomCEError, FloatingPointError):
    pass


class EmptySplit(DicomCEError, ValueError):
    pass


class EmptyInput(DicomCEError, ValueError):
    pass


class LengthMismatch(DicomCEError, ValueError):
    pass


class OutOfRange(DicomCEError, ValueError):
    pass


class InsufficientLabels(DicomCEError, ValueError):
    pass
