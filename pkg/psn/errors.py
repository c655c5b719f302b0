from typing import Optional


class PSNError(Exception):
    """Base class for every error raised by the psn package."""


class DimensionError(PSNError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PSNError, ValueError):
    """A documented precondition of an operation was violated."""


class DivergenceError(PSNError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        super().__init__(message)
        self.tensor_name = tensor_name


class IdxFormatError(PSNError):
    """An IDX container is malformed or truncated."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VerificationError(PSNError):
    """A self-check suite found a failing case."""

    def __init__(self, suite: str, witness: str):
        super().__init__(f"suite '{suite}' failed: {witness}")
        self.suite = suite
        self.witness = witness
