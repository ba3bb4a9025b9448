"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class DegenerateConstraintError(ValueError):
    """A keep-set or budget would leave a layer with no rows/columns."""


class ConstraintError(ValueError):
    """A sparsity constraint is invalid for the tensor it is applied to."""


class ConfigError(ValueError):
    """Experiment or algorithm configuration is malformed."""


class DataFormatError(ValueError):
    """An input data file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
