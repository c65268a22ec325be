"""Exception hierarchy shared by every module."""

from __future__ import annotations


class NsdeError(Exception):
    """Base class for all package errors."""


class ArgumentError(NsdeError, ValueError):
    pass


class InputShapeError(NsdeError, ValueError):
    pass


class ContractViolation(NsdeError):
    """A caller broke a documented precondition (e.g. non-scalar backward output)."""


class ParseError(NsdeError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.row = row
        self.column = column


class EmptySnapshotError(NsdeError):
    pass


class EmptyPairingError(NsdeError):
    pass


class NumericError(NsdeError, ArithmeticError):
    def __init__(self, message: str, where: tuple | None = None):
        super().__init__(f"{message} at (s, y, t)={where}" if where is not None else message)
        self.where = where


class NoSolutionError(NsdeError):
    pass


class SimulationError(NsdeError):
    def __init__(self, message: str, path: int, step: int):
        super().__init__(f"{message} (path {path}, step {step})")
        self.path = path
        self.step = step


class ContractGridError(NsdeError):
    pass


class DivergenceError(NsdeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class TrainingError(NsdeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class PdeConfigError(NsdeError):
    pass


class SolverError(NsdeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ExperimentError(NsdeError):
    pass
