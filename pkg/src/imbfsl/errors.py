"""Exception hierarchy. The CLI maps each family to an exit code."""


class ImbfslError(Exception):
    exit_code = 2


class InputError(ImbfslError, ValueError):
    """Bad argument, spec string or configuration value."""


class ParseError(InputError):
    """Malformed manifest, checkpoint or config file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class CapacityError(ImbfslError):
    """A class holds fewer samples than a sampling request needs."""


class DimensionError(ImbfslError, ValueError):
    pass


class ContractError(ImbfslError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class NumericError(ImbfslError, ArithmeticError):
    exit_code = 3
