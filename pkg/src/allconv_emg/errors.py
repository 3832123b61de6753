"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes: configuration and IO problems exit 1,
contract violations (shapes, architectures) exit 2, numerical failures exit 3.
"""


class AllConvError(Exception):
    exit_code = 1


class ConfigurationError(AllConvError, ValueError):
    exit_code = 1


class FormatError(AllConvError, ValueError):
    """A file on disk does not follow its declared binary or JSON layout."""

    exit_code = 1


class ContractViolation(AllConvError, ValueError):
    exit_code = 2


class ArchitectureMismatch(ContractViolation):
    exit_code = 2


class UsageError(AllConvError, RuntimeError):
    exit_code = 2


class NumericalError(AllConvError, FloatingPointError):
    exit_code = 3
