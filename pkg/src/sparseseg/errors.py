"""Exception hierarchy shared by every sparseseg module."""


class SparseSegError(Exception):
    pass


class ShapeError(SparseSegError, ValueError):
    pass


class ParameterError(SparseSegError, ValueError):
    pass


class DomainError(SparseSegError, ValueError):
    pass


class TokenIndexError(SparseSegError, IndexError):
    pass


class ContractError(SparseSegError, RuntimeError):
    pass


class ConfigError(SparseSegError, ValueError):
    pass


class AssemblyError(SparseSegError, ValueError):
    pass


class DataError(SparseSegError, ValueError):
    pass


class CheckpointError(SparseSegError, OSError):
    pass


class TrainingDiverged(SparseSegError, RuntimeError):
    """Raised when the loss becomes non-finite; ``diagnostics`` holds score statistics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
