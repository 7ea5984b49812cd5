"""Exception types shared across the package."""


class UnlearnError(Exception):
    """Base class for all package-specific failures."""


class LayoutError(UnlearnError):
    """Model layout has a zero/negative dimension or inconsistent shapes."""


class ShapeError(UnlearnError):
    """Array arguments do not conform (row counts, widths, vector lengths)."""


class DataError(UnlearnError):
    """Dataset content violates a contract (labels out of range, bad file)."""


class ParseError(DataError):
    """A CSV row could not be parsed; the message names the line."""


class LabelMappingError(DataError):
    """Label set is not contiguous 0..K-1; the message lists the remap."""


class SpecError(UnlearnError):
    """A forget/baseline spec is invalid for the dataset it targets."""


class TargetError(UnlearnError):
    """Target rows are not valid probability distributions."""


class NumericalOverflowError(UnlearnError):
    """Non-finite values survived exponent clamping in the solver."""


class InfeasibleProblemError(UnlearnError):
    """Class-mass vector is inconsistent with the row count."""


class InsufficientDataError(UnlearnError):
    """Too few examples remain after balancing/subsetting."""


class UsageError(UnlearnError):
    """An operation was called in a way its contract forbids."""
