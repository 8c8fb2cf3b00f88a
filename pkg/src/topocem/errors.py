"""Exception types shared across the package."""


class TopocemError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ContractViolation(TopocemError, ValueError):
    pass


class RejectedAction(TopocemError, ValueError):
    pass


class DomainError(TopocemError, ValueError):
    pass


class GridFileError(TopocemError, ValueError):
    pass


class ScenarioParseError(TopocemError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class InitializationError(TopocemError, RuntimeError):
    pass


class CheckpointFormatError(TopocemError, ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass
