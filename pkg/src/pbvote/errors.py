"""Exception types shared across the package."""


class PbvoteError(Exception):
    """Base class for all package errors."""


class ShapeError(PbvoteError):
    """Array dimensions incompatible with a network spec or operation."""


class ContractError(PbvoteError):
    """A caller violated a documented precondition or invariant."""


class ConfigError(PbvoteError):
    """Invalid run configuration (bad schema, missing file, bad value)."""


class NumericError(PbvoteError):
    """Non-finite value produced during evaluation or training.

    Carries enough context (layer index, diagnostic snapshot) to locate the
    failure without re-running.
    """

    def __init__(self, message, layer=None, snapshot=None):
        super().__init__(message)
        self.layer = layer
        self.snapshot = snapshot or {}
