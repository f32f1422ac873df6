"""Exception hierarchy shared across the toolkit."""


class MvmarkError(Exception):
    """Base class for all toolkit errors."""


class InputError(MvmarkError):
    """Malformed tensor input (shape/dtype/finiteness)."""


class DataError(MvmarkError):
    """Bad dataset contents: unknown ids, out-of-range labels, empty sets."""


class ConfigError(MvmarkError):
    """Invalid or inconsistent configuration."""


class SelectionError(MvmarkError):
    """Trigger selection asked for more samples than exist."""


class WatermarkError(MvmarkError):
    """Watermark training cannot proceed (e.g. empty trigger set)."""


class AttackError(MvmarkError):
    """Attack cannot run (e.g. empty surrogate data)."""


class VerificationError(MvmarkError):
    """Ownership test undefined for the given inputs."""


class PersistenceError(MvmarkError):
    """Corrupt, truncated, or version-mismatched artifact file."""


class ReportError(MvmarkError):
    """Report requested from an incomplete run manifest."""
