"""Exception types shared across the package."""


class NeuralHmmError(Exception):
    """Base class for all package errors."""


class InvalidArgument(NeuralHmmError, ValueError):
    pass


class InvalidData(NeuralHmmError, ValueError):
    pass


class ParseError(InvalidData):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = [str(path)] if path is not None else []
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class NumericError(NeuralHmmError, ArithmeticError):
    pass


class DegenerateFilterError(NumericError):
    """All particle weights vanished at some time step."""

    def __init__(self, step):
        self.step = step
        super().__init__(
            f"all particle weights underflowed to zero at step {step}; "
            "retry with more particles or a better initialization"
        )


class DegenerateStatisticsError(NumericError):
    pass


class UnsupportedModel(NeuralHmmError, ValueError):
    pass
