"""Exception hierarchy shared by every flowscope module."""


class FlowscopeError(Exception):
    """Base class for all errors raised by flowscope."""


class InvalidInputError(FlowscopeError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(FlowscopeError, ValueError):
    """A dataset, grid, checkpoint or sweep file could not be decoded.

    Args:
        message: Description of the problem.
        row: Optional 1-based row (or record) number where it was found.
        column: Optional 0-based column index where it was found.
    """

    def __init__(self, message: str, row: int | None = None, column: int | None = None) -> None:
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(location)})" if location else message)


class DivergenceError(FlowscopeError, ArithmeticError):
    """Euler integration produced a non-finite state."""

    def __init__(self, step: int, t: float) -> None:
        self.step = step
        self.t = t
        super().__init__(f"Non-finite state after Euler step {step} (t={t:.6g}).")
