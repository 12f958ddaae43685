"""Exception hierarchy shared across the toolkit."""


class KCForgeError(Exception):
    """Base class for all errors raised by kcforge."""


class InputError(KCForgeError):
    """Bad user input: unparseable files, violated invariants, invalid config."""


class ScoringError(KCForgeError):
    """Base class for scoring-backend failures."""


class TransportError(ScoringError):
    """Backend unreachable or temporarily failing; safe to retry."""


class ProtocolError(ScoringError):
    """Backend answered but violated the wire contract; retrying will not help."""


class CacheCorruptError(KCForgeError):
    """Score cache contains entries that cannot be parsed (strict mode only)."""
