"""Exception types shared across the package."""


class TomatoSegError(Exception):
    """Base class for all package errors."""


class ShapeError(TomatoSegError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(TomatoSegError):
    """Invalid configuration value or combination."""


class ContractError(TomatoSegError):
    """An operation was called outside its documented contract."""


class NumericError(TomatoSegError):
    """A non-finite value (NaN/Inf) appeared where finiteness is guaranteed."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CorruptIndexError(TomatoSegError):
    """Pooling indices do not address valid elements of their source tensor."""


class CheckpointError(TomatoSegError):
    """Malformed checkpoint file. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ManifestError(TomatoSegError):
    """Dataset directory does not satisfy the expected layout."""


class LabelError(TomatoSegError):
    """Mask contains a class index outside the declared class map."""


class TrainAbort(TomatoSegError):
    """Training aborted because of a runtime failure (e.g. NaN loss)."""
