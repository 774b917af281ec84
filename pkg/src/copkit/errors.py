"""Exception hierarchy.

Every error raised deliberately by the package derives from ``CopkitError`` so
callers (the CLI in particular) can tell them apart from programming errors.
"""


class CopkitError(Exception):
    pass


class DimensionMismatch(CopkitError, ValueError):
    pass


class InvalidModel(CopkitError, ValueError):
    """A transition tensor, policy or distribution violates its invariants."""


class NonErgodic(CopkitError):
    pass


class NonEpisodic(CopkitError):
    pass


class SolverFailure(CopkitError, RuntimeError):
    pass


class InvalidDiscount(CopkitError, ValueError):
    pass


class ZeroDenominator(CopkitError, ZeroDivisionError):
    def __init__(self, state: int, msg: str | None = None):
        self.state = int(state)
        super().__init__(msg or f"zero denominator at state {self.state}")


class IllConditioned(CopkitError):
    pass


class DegenerateMass(CopkitError):
    pass


class Diverged(CopkitError):
    def __init__(self, step: int, max_abs: float):
        self.step = step
        self.max_abs = max_abs
        super().__init__(f"iterate exceeded divergence threshold at step {step} (max |c| = {max_abs:.3g})")


class BoundViolated(CopkitError, AssertionError):
    pass


class PreconditionViolated(CopkitError):
    def __init__(self, norm: float, limit: float):
        self.norm = norm
        self.limit = limit
        super().__init__(f"||Pi_d P_pi||_d_pi = {norm:.6g} >= 1/gamma = {limit:.6g}")


class Infeasible(CopkitError):
    pass


class InsufficientSamples(CopkitError, ValueError):
    pass


class InvalidSlot(CopkitError, IndexError):
    pass


class EmptyBuffer(CopkitError):
    pass


class ZeroMass(CopkitError):
    pass


class BufferNotWarm(CopkitError):
    pass


class InvalidSpec(CopkitError, ValueError):
    pass


class ConfigError(CopkitError, ValueError):
    pass


class StudyFailed(CopkitError):
    """One or more study cells failed; partial results were still written."""


class LowCoverage(CopkitError):
    """The behavior policy leaves some state below the configured coverage."""
