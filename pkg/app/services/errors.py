"""
Exception types shared across the services.

Input problems subclass ValueError so callers that only know about ValueError
still catch them; runtime failures (solvers, training, file formats) do not.
"""


class GabiError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(GabiError, ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"shape mismatch in {op}: {detail}")


class NonFiniteError(GabiError, ValueError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value produced by {where}")


class NonScalarRootError(GabiError, ValueError):
    pass


class GraphError(GabiError, ValueError):
    pass


class ObservationIndexError(GabiError, IndexError):
    pass


class SolverError(GabiError):
    pass


class SingularSystemError(SolverError):
    def __init__(self, kappa: float, detail: str = ""):
        self.kappa = kappa
        msg = f"singular Helmholtz system for kappa={kappa}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class FormatError(GabiError):
    pass


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, offset: int, wanted: int):
        self.offset = offset
        super().__init__(f"truncated file: needed {wanted} bytes at offset {offset}")


class ConsistencyError(FormatError):
    pass


class DivergenceError(GabiError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")


class DegenerateBatchError(GabiError, ValueError):
    pass


class ConfigError(GabiError, ValueError):
    pass


class StageError(GabiError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
