"""Exception hierarchy shared by the simulator, optimizer and CLI."""


class LactocrystError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LactocrystError):
    """Invalid or incomplete configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelDomainError(LactocrystError, ValueError):
    """A model formula was evaluated outside its domain (e.g. k_v*mu3 >= 1)."""


class StepSizeUnderflow(LactocrystError):
    """Adaptive integrator could not meet tolerance with the minimum step."""


class StateInvariantViolated(LactocrystError):
    """A state left its admissible set during integration."""

    def __init__(self, component, time, value):
        self.component = component
        self.time = time
        self.value = value
        super().__init__(f"state component {component!r} = {value!r} invalid at t = {time!r} s")


class CFLViolation(LactocrystError):
    """Explicit PBE step exceeds the stability limit."""

    def __init__(self, cfl, suggested_dt):
        self.cfl = cfl
        self.suggested_dt = suggested_dt
        super().__init__(f"CFL number {cfl:.3g} > 1; use dt <= {suggested_dt:.6g} s")


class BoundViolation(LactocrystError, ValueError):
    """A control value lies outside its admissible box."""


class InfeasibleStart(LactocrystError):
    """The optimizer's initial guess cannot be simulated."""


class NoProgress(LactocrystError):
    """The optimizer stalled; carries the best-so-far solution."""

    def __init__(self, message, solution=None):
        self.solution = solution
        super().__init__(message)


class NotRealizable(LactocrystError):
    """Target moments are not the moments of a positive density (or lie on the boundary)."""


class MaxIterExceeded(LactocrystError):
    """Maximum-entropy Newton iteration did not converge; carries the best iterate."""

    def __init__(self, message, solution=None):
        self.solution = solution
        super().__init__(message)
