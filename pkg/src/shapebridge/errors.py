"""Exception hierarchy shared by every module."""


class ShapeBridgeError(Exception):
    """Base class for all errors raised by shapebridge."""


class MalformedInputError(ShapeBridgeError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateShapeError(ShapeBridgeError):
    """A curve has too few points, zero length or zero size."""


class InsufficientResolutionError(ShapeBridgeError):
    """More Fourier bases were requested than the sampling supports."""


class AliasingError(ShapeBridgeError):
    """The quadrature grid is too coarse for the noise frequencies."""


class NumericalBlowupError(ShapeBridgeError):
    """A simulated state became non-finite or exceeded the magnitude guard."""

    def __init__(self, t, norm, step=None):
        self.t = t
        self.norm = norm
        self.step = step
        msg = f"numerical blowup at t={t:.6g} (|x|={norm:.6g})"
        if step is not None:
            msg += f", step {step}"
        super().__init__(msg)


class HorizonError(ShapeBridgeError):
    """A score was requested at or beyond the terminal time."""


class IllConditionedCovarianceError(ShapeBridgeError):
    """A covariance matrix is singular or not positive definite."""


class PlanError(ShapeBridgeError):
    """A network plan or parameter set is inconsistent."""


class IncompatibleModelError(ShapeBridgeError):
    """A checkpoint does not match the requested system."""


class NonFiniteActivationError(ShapeBridgeError):
    """A network layer produced NaN or infinite activations."""


class TrainingAbortedError(ShapeBridgeError):
    """Training stopped because the loss became non-finite."""
