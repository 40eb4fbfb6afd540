"""Input checks shared by the estimator layer and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .skeleton import PoseSequence
from .synthgen import Episode


def check_video(video, name: str = "video") -> np.ndarray:
    """A float64 (F, H, W, 3) array with finite values in [0, 1]."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim != 4 or v.shape[-1] != 3:
        raise InvalidArgumentError(f"{name} must have shape (F, H, W, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    if v.min() < 0 or v.max() > 1:
        raise InvalidArgumentError(f"{name} values must lie in [0, 1]")
    return v


def check_same_shape(a, b, names=("a", "b")) -> None:
    if np.shape(a) != np.shape(b):
        raise InvalidArgumentError(f"{names[0]} and {names[1]} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_probability(p: float, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_episodes(X, name: str = "X") -> list[Episode]:
    """A non-empty list of episodes sharing one frame size and length."""
    if isinstance(X, Episode):
        X = [X]
    eps = list(X)
    if not eps:
        raise InvalidArgumentError(f"{name} is empty")
    bad = [type(e).__name__ for e in eps if not isinstance(e, Episode)]
    if bad:
        raise InvalidArgumentError(f"{name} must contain Episode objects, got {bad[0]}")
    shapes = {e.gt_video.shape for e in eps}
    if len(shapes) > 1:
        raise InvalidArgumentError(f"{name} mixes video shapes {sorted(shapes)}")
    return eps


def check_pose_sequences(X: Sequence, name: str = "X") -> list[PoseSequence]:
    seqs = [X] if isinstance(X, PoseSequence) else list(X)
    bad = [type(s).__name__ for s in seqs if not isinstance(s, PoseSequence)]
    if bad:
        raise InvalidArgumentError(f"{name} must contain PoseSequence objects, got {bad[0]}")
    return seqs
