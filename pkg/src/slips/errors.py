"""Exception hierarchy shared by all modules."""


class SlipsError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SlipsError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InvalidInputError(SlipsError, ValueError):
    """Input data is malformed (wrong shape, non-finite coordinates, ...)."""


class UnsupportedTargetError(SlipsError):
    """The target lacks a capability the operation needs (oracle, moments)."""


class InitializationError(SlipsError, FloatingPointError):
    """Langevin-within-Langevin initialization produced a non-finite value."""


class SimulationError(SlipsError):
    """A hard failure inside a SLIPS run, annotated with where it happened."""

    def __init__(self, message, *, phase, step, runs=None):
        self.phase = phase
        self.step = step
        self.runs = runs
        where = f"{phase} step {step}"
        if runs is not None:
            where += f" (runs {list(runs)})"
        super().__init__(f"{where}: {message}")


class ConfigError(SlipsError):
    """Experiment configuration is invalid; carries the offending location."""

    def __init__(self, message, *, section=None, key=None, line=None):
        self.section = section
        self.key = key
        self.line = line
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if section is not None:
            loc.append(f"[{section}]" + (f" {key}" if key else ""))
        prefix = ", ".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
