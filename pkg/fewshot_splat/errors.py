"""
Exception hierarchy shared by every stage.
Each error carries the process exit code the CLI returns for it.
"""


class FewShotSplatError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class InputError(FewShotSplatError):
    """Missing or unreadable input (files, flags, manifests)."""

    exit_code = 2


class UnsupportedFormatError(InputError):
    """Input is readable but uses a layout or model we do not handle."""


class CorruptFileError(InputError):
    """Input file is truncated or internally inconsistent."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        details = message
        if path is not None:
            details = f"{path}: {details}"
        if offset is not None:
            details = f"{details} (at byte offset {offset})"
        super().__init__(details)
        self.path = path
        self.offset = offset


class InitializationError(InputError):
    """Splat initialization was asked to start from nothing."""


class NumericalError(FewShotSplatError):
    """Non-finite values appeared during optimization."""

    exit_code = 3

    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"loss term '{term}' became {value} at iteration {iteration}")
        self.term = term
        self.iteration = iteration
        self.value = value


class DegenerateGeometryError(FewShotSplatError):
    """Geometry too degenerate for the requested operation."""

    exit_code = 4


class DegenerateFitError(DegenerateGeometryError):
    """Scale/offset fit is underdetermined."""


class SplitError(DegenerateGeometryError):
    """Camera layout cannot be split into a hull train pool and a test set."""


class ContractError(FewShotSplatError, ValueError):
    """Caller broke an API contract (shape mismatch, missing records)."""
