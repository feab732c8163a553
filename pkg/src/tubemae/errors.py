"""Exception hierarchy shared across the package."""


class TubeMAEError(Exception):
    """Base class for all package errors."""


class ConfigError(TubeMAEError, ValueError):
    pass


class ValidationError(TubeMAEError, ValueError):
    pass


class ShapeError(TubeMAEError, ValueError):
    pass


class IngestError(TubeMAEError):
    pass


class EmptyVideoError(IngestError):
    pass


class CorruptCorpusError(TubeMAEError):
    pass


class NumericsError(TubeMAEError, ArithmeticError):
    pass


class DegenerateMaskError(NumericsError):
    pass


class DegenerateTestError(TubeMAEError, ValueError):
    pass


class EmptyInputError(TubeMAEError, ValueError):
    pass


class ContractError(TubeMAEError):
    pass


class LeakageError(TubeMAEError):
    """Raised when pre-training data overlaps an evaluation test split."""

    def __init__(self, shared_ids):
        self.shared_ids = sorted(shared_ids)
        super().__init__(f"{len(self.shared_ids)} video(s) shared with test splits: {self.shared_ids}")
