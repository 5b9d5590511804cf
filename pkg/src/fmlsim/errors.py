"""Exception types shared across the simulator modules."""


class FmlsimError(Exception):
    """Base class for all simulator errors."""


class InvalidParam(FmlsimError):
    """A generator or operation received an out-of-domain argument."""


class BadMagic(FmlsimError):
    """An IDX file does not start with the expected magic number."""


class TruncatedFile(FmlsimError):
    """An IDX file ends before (or after) the declared payload."""


class CountMismatch(FmlsimError):
    """Image and label files declare different sample counts."""


class ShapeMismatch(FmlsimError):
    """Model parameters and input features disagree on dimensions."""


class EmptyCoalition(FmlsimError):
    """An operation that needs at least one member got none."""


class InvalidFrequency(FmlsimError):
    """A CPU frequency outside (0, inf) was supplied."""


class DegenerateFrequencyRange(FmlsimError):
    """A coalition frequency range with delta_hi < delta_lo."""


class DimMismatch(FmlsimError):
    """Vectors of different lengths were compared."""


class Infeasible(FmlsimError):
    """No feasible point exists (deadline, bounds, or allocation)."""


class NonConvergence(FmlsimError):
    """An iterative procedure exceeded its safety bound."""


class NonMonotoneRound(FmlsimError):
    """A ledger block with a round lower than its predecessor."""


class ConfigInvalid(FmlsimError):
    """An experiment configuration failed validation."""
