"""Exception hierarchy; the CLI maps these onto exit codes."""


class CondsimError(Exception):
    exit_code = 2


class ConfigError(CondsimError, ValueError):
    """Invalid parameters, mismatched grids, unsupported combinations."""

    exit_code = 1


class RangeError(CondsimError, IndexError):
    """Query outside a realized window."""

    exit_code = 1


class WindowExhausted(CondsimError):
    """A walk left its spatial window while extension was disabled."""

    exit_code = 2


class NumericalError(CondsimError, ArithmeticError):
    """A numerical tolerance could not be met."""

    exit_code = 2


class AcceptanceFailure(CondsimError):
    exit_code = 3
