"""Exception types shared across the package."""


class ChronoqError(Exception):
    """Base class for all chronoq-specific failures."""


class UndefinedSdError(ChronoqError):
    """A delay SD was requested for statistics that cannot support one (e.g. zero pairs)."""


class OutOfRangeError(ChronoqError):
    """A quantity left the representable/physical range (e.g. link loss underflows to zero flux)."""


class AcquisitionError(ChronoqError):
    """Coarse correlation search found no peak significantly above background."""


class ConfigError(ChronoqError):
    """Experiment configuration failed schema validation."""


class TagFileError(ChronoqError):
    """A stored time-tag file is malformed; message names the offending line/byte offset."""
