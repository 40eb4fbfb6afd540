"""Multi-subject character animation with pose unbinding and semantic/spatial
rebinding, at desk scale on procedurally generated episodes."""

__version__ = "0.1.0"

from .config import Config, load_config
from .errors import DataIOError, FormatError, InvalidArgumentError, MultianimError, TrainingDivergenceError

__all__ = [
    "Config",
    "load_config",
    "MultianimError",
    "InvalidArgumentError",
    "DataIOError",
    "FormatError",
    "TrainingDivergenceError",
    "__version__",
]
