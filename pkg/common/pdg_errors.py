"""
Exception types shared by the probabilistic domain-generalization modules.
"""

from typing import Optional


class ValidationError(ValueError):
    """an input violates the documented preconditions of an operation"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field: Optional[str] = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class InputShapeError(ValidationError):
    """operands have incompatible dimensions"""


class ConfigError(ValidationError):
    """an experiment configuration is invalid (message carries the dotted field path)"""


class DataFormatError(ValueError):
    """any kind of problem discovered while parsing a dataset, embedding or checkpoint file"""


class NumericError(ArithmeticError):
    """a computation produced non-finite or impossible values"""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where: Optional[str] = where
        super().__init__(message)
