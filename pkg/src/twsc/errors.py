"""Exception taxonomy for the twsc package.

Every failure mode raised on purpose by this package derives from
:class:`TwscError`, so callers can catch one base class at the CLI
boundary and still distinguish programming-contract violations from
data or training problems.
"""


class TwscError(Exception):
    """Base class for all errors raised deliberately by twsc."""


class ValidationError(TwscError):
    """A configuration value is out of range or inconsistent."""


class ConfigParseError(TwscError):
    """A config file line could not be parsed; message names the line."""


class IngestError(TwscError):
    """A dataset file is missing, malformed, or has the wrong size."""


class ContractError(TwscError):
    """An internal API contract was violated (shapes, node ids, misuse)."""


class DegenerateInputError(TwscError):
    """An input is valid in type but unusable (e.g. an all-zero image
    whose symbol block cannot be power-normalized)."""


class NumericFaultError(TwscError):
    """A network layer produced a non-finite activation; message names
    the network and layer index."""


class LinkFeedbackError(TwscError):
    """A gradient tried to traverse the physical link. The link is
    forward-only by design; this is always a bug in the caller."""


class TrainingDivergedError(TwscError):
    """Training loss stayed non-finite or regressed for too many
    consecutive steps. Carries the path of the last good checkpoint."""

    def __init__(self, message: str, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class CheckpointError(TwscError):
    """A checkpoint file is unreadable or incompatible."""
