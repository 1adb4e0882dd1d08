class BreakguardException(Exception):
    """
    Base class for all exceptions raised by breakguard.
    """


class InvalidGeometryError(BreakguardException, ValueError):
    """
    A geometry or mesh has zero or negative dimensions, or a cell with
    non-positive signed area.
    """


class ShapeError(BreakguardException, ValueError):
    """
    Two fields live on different spaces, or a coefficient vector does not match
    the dof count of its space.
    """


class AssemblyError(BreakguardException):
    """
    An element kernel claims a cell or edge region that the mesh does not
    tag.
    """


class SolverError(BreakguardException):
    """
    A sparse factorization or solve failed.

    Parameters
    ----------
    message: str
        A description of the failure.
    stage: str
        Which stage of a larger computation the failure happened in, eg
        ``"state"``, ``"adjoint"``, or ``"design_gradient.linear_adjoint"``.
    pivot_ratio: float
        The ratio of the smallest to the largest absolute pivot of the failed
        factorization, if known.
    """
    def __init__(self, message, stage=None, pivot_ratio=None):
        self.stage = stage
        self.pivot_ratio = pivot_ratio
        if stage:
            message = f"[{stage}] {message}"
        if pivot_ratio is not None:
            message = f"{message} (pivot ratio {pivot_ratio:.3e})"
        super().__init__(message)


class ConfigError(BreakguardException, ValueError):
    """
    A run configuration is invalid.

    Parameters
    ----------
    key_path: str
        The dotted path of the offending key, eg ``"matern.sigma"``.
    message: str
        What is wrong with the value at ``key_path``.
    """
    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class VerificationError(BreakguardException):
    """
    One or more verification suites failed. ``report`` holds the full
    pass/fail report.
    """
    def __init__(self, report):
        self.report = report
        failed = [name for name, suite in report["suites"].items()
            if not suite["passed"]]
        super().__init__(f"verification failed: {', '.join(failed)}")
