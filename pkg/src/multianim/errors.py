"""Exception types. Each carries a short ``category`` used by the CLI."""


class MultianimError(Exception):
    category = "error"


class InvalidArgumentError(MultianimError, ValueError):
    category = "invalid-argument"


class DataIOError(MultianimError, OSError):
    category = "io-error"


class FormatError(MultianimError, ValueError):
    category = "format-error"


class TrainingDivergenceError(MultianimError, RuntimeError):
    category = "training-divergence"
