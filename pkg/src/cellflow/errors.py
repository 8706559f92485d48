"""Exception hierarchy shared by all cellflow modules."""


class CellflowError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "CELLFLOW_ERROR"


class StructureViolation(CellflowError):
    code = "STRUCTURE_VIOLATION"


class QuadNoClosure(CellflowError):
    code = "QUAD_NO_CLOSURE"


class MaxTimeExceeded(CellflowError):
    code = "MAX_TIME_EXCEEDED"


class CflViolation(CellflowError):
    code = "CFL_VIOLATION"


class CoefficientRange(CellflowError):
    code = "COEFFICIENT_RANGE"


class NotSPD(CellflowError):
    code = "NOT_SPD"


class DoeblinFail(CellflowError):
    code = "DOEBLIN_FAIL"


class SingularPoisson(CellflowError):
    code = "SINGULAR_POISSON"


class ConfigError(CellflowError):
    code = "CONFIG_ERROR"
