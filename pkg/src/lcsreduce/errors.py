"""Exception hierarchy shared across the package."""


class LcsReduceError(Exception):
    """Base class for all package errors."""


class NonMonotone(LcsReduceError, ValueError):
    """LCP matrix does not have a positive-definite symmetric part."""


class NoConvergence(LcsReduceError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NoSolution(LcsReduceError, RuntimeError):
    """Enumeration found no feasible active set."""


class AmbiguousSolution(LcsReduceError, RuntimeError):
    """Enumeration found two feasible active sets with different solutions."""


class InvalidParams(LcsReduceError, ValueError):
    """LCS parameters violate a dimension or definiteness invariant."""


class GenerationExhausted(LcsReduceError, RuntimeError):
    """Random generation failed the screening test on every attempt."""


class StateExplosion(LcsReduceError, RuntimeError):
    """A rollout left the admissible state region."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SimulationError(LcsReduceError, RuntimeError):
    """A rollout step failed; ``index`` is the failing step."""

    def __init__(self, message, index):
        super().__init__(f"step {index}: {message}")
        self.index = index


class DegenerateBuffer(LcsReduceError, ValueError):
    """Too few inputs to compute trust-region statistics."""


class DegenerateBaseline(LcsReduceError, ValueError):
    """Baseline cost is not positive, so a relative gap is undefined."""


class ConfigError(LcsReduceError, ValueError):
    """Configuration document is malformed or carries unknown fields."""


class SchemaError(LcsReduceError, ValueError):
    """Serialized artifact is malformed or has the wrong schema version."""


class PartialAggregation(LcsReduceError, RuntimeError):
    """Some trials failed; the aggregate covers only the successful ones."""

    def __init__(self, message, results=None):
        super().__init__(message)
        self.results = results or []
