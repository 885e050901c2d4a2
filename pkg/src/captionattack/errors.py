"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, oracle-side failures
(OracleIOError, ProtocolError, BudgetError, UnsupportedCapabilityError) -> 3,
DataError -> 4.
"""


class AttackToolkitError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AttackToolkitError):
    """Invalid or inconsistent run configuration."""


class CoordinateError(AttackToolkitError):
    """Pixel coordinate outside the image bounds."""


class InvalidPerturbationError(AttackToolkitError):
    """Perturbation violates its structural invariants."""


class DegenerateAttentionError(AttackToolkitError):
    """Attention mass vanished (all-zero grid or saliency map)."""


class EmptyCaptionError(AttackToolkitError):
    """An operation that needs at least one caption token got none."""


class BudgetExceedsRegionError(AttackToolkitError):
    """Pixel budget is larger than the candidate region."""


class InvalidReferenceError(AttackToolkitError):
    """Reference caption set is empty or malformed."""


class OracleIOError(AttackToolkitError):
    """Transport-level failure while talking to a caption oracle."""


class ProtocolError(AttackToolkitError):
    """The oracle answered, but the response violates the wire protocol."""


class BudgetError(AttackToolkitError):
    """Oracle call budget exhausted."""


class UnsupportedCapabilityError(AttackToolkitError):
    """Requested an operation the endpoint does not advertise."""


class InternalConsistencyError(AttackToolkitError):
    """Toy captioner bookkeeping failed (token not traceable to a cell)."""


class DataError(AttackToolkitError):
    """Dataset or report files are missing, unparseable, or inconsistent."""
