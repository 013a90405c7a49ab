class CurbzonesError(Exception):
    """Base class for all errors raised by curbzones."""


class InvalidInputError(CurbzonesError, ValueError):
    pass


class ParseError(InvalidInputError):
    """A malformed row in an input table.

    ``line`` is the 1-based physical line number in the file (header is line 1).
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptySliceError(InvalidInputError):
    pass


class InvalidModelError(CurbzonesError, ValueError):
    pass


class FitFailureError(CurbzonesError, RuntimeError):
    def __init__(self, message, slice_id=None):
        self.slice_id = slice_id
        if slice_id is not None:
            message = f"{message} (slice {slice_id})"
        super().__init__(message)


class ComponentCollapse(CurbzonesError, ArithmeticError):
    """Raised by the M-step when a component's responsibility mass vanishes."""

    def __init__(self, components):
        self.components = list(components)
        super().__init__(f"collapsed components: {self.components}")


class DegenerateVarianceError(CurbzonesError, ArithmeticError):
    pass


class DegenerateWeightsError(CurbzonesError, ArithmeticError):
    pass
