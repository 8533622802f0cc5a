"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class XjacError(Exception):
    exit_code = 1


class UsageError(XjacError, ValueError):
    exit_code = 1


class DataError(XjacError, ValueError):
    exit_code = 2


class NumericalError(XjacError, ArithmeticError):
    exit_code = 3
