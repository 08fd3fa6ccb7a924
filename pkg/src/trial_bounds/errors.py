"""Exception hierarchy shared by every module."""


class TrialBoundsError(ValueError):
    """Base class; the CLI maps any subclass to exit code 2."""


class SchemaError(TrialBoundsError):
    """Input columns or document keys do not match the expected layout."""


class ConsistencyError(TrialBoundsError):
    """A record's action disagrees with its policy's action map."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class RangeError(TrialBoundsError):
    """An outcome lies outside the declared [y_min, y_max]."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class RegistryError(TrialBoundsError):
    pass


class EmptyDatasetError(TrialBoundsError):
    pass


class DegenerateError(TrialBoundsError):
    """Too few observations for a variance estimate."""


class UndefinedPerformanceError(TrialBoundsError):
    pass


class DomainError(TrialBoundsError):
    pass


class ConfigError(TrialBoundsError):
    pass


class RegionEmptyError(TrialBoundsError):
    pass


class InsufficientDataError(TrialBoundsError):
    pass
