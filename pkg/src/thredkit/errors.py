"""Exception hierarchy shared across the toolkit.

Exit-code mapping lives in the CLI: ConfigError -> 2, I/O (OSError) -> 3,
DivergenceError -> 4.
"""


class ThredkitError(Exception):
    pass


class ConfigError(ThredkitError):
    """Bad configuration value, flag, or file."""


class ShapeError(ThredkitError):
    """Incompatible tensor/vector shapes; message carries both shapes."""


class DomainError(ThredkitError):
    """Value outside the mathematical domain of an operation (e.g. var < 0)."""


class ContractError(ThredkitError):
    """Caller violated an operation precondition."""


class EmptyCorpusError(ThredkitError):
    """A corpus file produced zero valid dialogs."""


class EvaluationError(ThredkitError):
    """A function under numeric scrutiny returned a non-finite value."""


class DivergenceError(ThredkitError):
    """Training loss became non-finite. Carries the last good checkpoint."""

    def __init__(self, message, component=None, checkpoint=None):
        super().__init__(message)
        self.component = component
        self.checkpoint = checkpoint
