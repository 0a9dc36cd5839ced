"""Exception types shared across the package."""


class MixsimError(Exception):
    """Base class for package errors."""


class ConfigError(MixsimError):
    """Invalid or unparseable run configuration."""


class ProtocolError(MixsimError):
    """Invalid protocol construction or an operation the protocol lacks."""


class MixingNotObservedError(MixsimError):
    """Contraction to consensus was not observed within the horizon.

    ``best_ratio`` records the smallest distance ratio seen before giving up,
    which separates "almost mixed" from "provably never mixes" in reports.
    """

    def __init__(self, message: str, best_ratio: float = float("inf")):
        super().__init__(message)
        self.best_ratio = best_ratio


class ScheduleError(MixsimError):
    """Step-size schedule cannot be evaluated (bad table, zero divisor)."""
