"""Error hierarchy shared by the components and the command line."""

from typing import Optional


class DwellOptError(Exception):
    """Root of every domain error raised by the package."""


class ConfigError(DwellOptError, ValueError):
    """Invalid configuration or command-line usage."""


class CaseParseError(DwellOptError, ValueError):
    """A case file could not be parsed."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(location)})" if location else message)
        self.field = field
        self.line = line


class CaseValidationError(DwellOptError, ValueError):
    """A case violates one of its invariants."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class PhantomConstructionError(DwellOptError, ValueError):
    """A phantom spec cannot be realized (e.g. overlapping mandatory ROIs)."""


class ContractError(DwellOptError, ValueError):
    """A caller violated a documented precondition."""


class InfeasibleInitializationError(DwellOptError, RuntimeError):
    """No catheter-contribution feasible initial population could be built."""


class ArchiveEmptyError(DwellOptError, ValueError):
    """An operation needs at least one archived solution."""
