"""Exception taxonomy. The CLI maps these onto distinct exit codes."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent; message names the offending axis."""


class DataError(ValueError):
    """Bad input data: unreadable files, wrong format, empty corpus."""


class NumericsError(ArithmeticError):
    """Non-finite values encountered; message names the first bad node."""
