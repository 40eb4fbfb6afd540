"""Training-time decoupling of the driving pose from the reference layout.

Two stages, both stochastic and both skipped outside training:

* pose level: one random translation + scale applied to the whole clip;
* feature level: non-circular shift of the encoded pose grid, then the pose
  region is copied to random offsets and summed back onto the grid.
"""

from __future__ import annotations

import logging
from collections import Counter
from typing import NamedTuple

import numpy as np
import torch

from .config import UnbindConfig
from .errors import InvalidArgumentError
from .skeleton import PoseSequence, scale_skeleton, translate_skeleton

log = logging.getLogger(__name__)

# Instrumentation: how often each augmentation actually ran.
call_counts: Counter = Counter()


def reset_call_counts() -> None:
    call_counts.clear()


class PoseTransform(NamedTuple):
    dx: float
    dy: float
    scale: float


IDENTITY = PoseTransform(0.0, 0.0, 1.0)


def draw_pose_transform(cfg: UnbindConfig, rng: np.random.Generator) -> PoseTransform:
    r = cfg.translate_range
    dx, dy = rng.uniform(-r, r, size=2)
    return PoseTransform(float(dx), float(dy), float(rng.uniform(cfg.scale_lo, cfg.scale_hi)))


def apply_pose_transform(seq: PoseSequence, tf: PoseTransform) -> PoseSequence:
    """Scale about the clip's bounding-box center, then translate."""
    box = seq.bbox()
    if box is None:
        return seq
    center = ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)
    return translate_skeleton(scale_skeleton(seq, tf.scale, center), tf.dx, tf.dy)


def _on_canvas(seq: PoseSequence) -> bool:
    box = seq.bbox()
    return box is None or (box[0] >= 0 and box[1] >= 0 and box[2] <= 1 and box[3] <= 1)


def pose_unbind(
    seq: PoseSequence, cfg: UnbindConfig, rng: np.random.Generator
) -> tuple[PoseSequence, PoseTransform]:
    """Randomly move and resize the whole driving clip.

    With ``clamp_to_canvas`` draws are resampled until the clip stays inside the
    canvas; after ``max_attempts`` failures the identity is used.
    """
    if not cfg.enabled:
        raise InvalidArgumentError("pose_unbind called with unbind disabled")
    call_counts["pose_unbind"] += 1
    for _ in range(cfg.max_attempts):
        tf = draw_pose_transform(cfg, rng)
        out = apply_pose_transform(seq, tf)
        if not cfg.clamp_to_canvas or _on_canvas(out):
            return out, tf
    log.info("pose_unbind: no on-canvas draw in %d attempts, keeping the input", cfg.max_attempts)
    call_counts["pose_unbind_fallback"] += 1
    return seq, IDENTITY


def maybe_pose_unbind(seq: PoseSequence, cfg: UnbindConfig, rng, training: bool) -> PoseSequence:
    if not (training and cfg.enabled):
        return seq
    return pose_unbind(seq, cfg, rng)[0]


# -- feature level -----------------------------------------------------------------


class Box(NamedTuple):
    """Inclusive token-grid box ``[h0, h1] x [w0, w1]``."""

    h0: int
    h1: int
    w0: int
    w1: int

    @property
    def height(self) -> int:
        return self.h1 - self.h0 + 1

    @property
    def width(self) -> int:
        return self.w1 - self.w0 + 1


def locate_pose_region(feat: torch.Tensor, tau: float = 0.05) -> Box | None:
    """Tightest box around cells whose channel norm exceeds ``tau`` times the max.

    ``feat`` is (C, F, H, W); the box is unioned over frames. Returns None for an
    all-zero map.
    """
    if feat.dim() != 4:
        raise InvalidArgumentError(f"expected (C, F, H, W) features, got {tuple(feat.shape)}")
    norms = feat.detach().norm(dim=0).amax(dim=0)  # (H, W)
    peak = norms.max()
    if not peak > 0:
        return None
    hit = norms > tau * peak
    if hit.all():
        return Box(0, norms.shape[0] - 1, 0, norms.shape[1] - 1)
    rows = torch.nonzero(hit.any(dim=1)).flatten()
    cols = torch.nonzero(hit.any(dim=0)).flatten()
    return Box(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def shift_grid(feat: torch.Tensor, dh: int, dw: int) -> torch.Tensor:
    """Move the (..., H, W) grid by (dh, dw) cells; vacated cells become zero."""
    H, W = feat.shape[-2:]
    out = torch.zeros_like(feat)
    if abs(dh) >= H or abs(dw) >= W:
        return out
    src_h = slice(max(0, -dh), H - max(0, dh))
    dst_h = slice(max(0, dh), H - max(0, -dh))
    src_w = slice(max(0, -dw), W - max(0, dw))
    dst_w = slice(max(0, dw), W - max(0, -dw))
    out[..., dst_h, dst_w] = feat[..., src_h, src_w]
    return out


def superimpose(feat: torch.Tensor, box: Box, offsets) -> torch.Tensor:
    """Add a copy of ``feat[box]`` with its top-left corner at each (h, w) offset."""
    src = feat[..., box.h0 : box.h1 + 1, box.w0 : box.w1 + 1]
    out = feat.clone()
    for h, w in offsets:
        out[..., h : h + box.height, w : w + box.width] = (
            out[..., h : h + box.height, w : w + box.width] + src
        )
    return out


class FeatureDraw(NamedTuple):
    shift: tuple[int, int]
    offsets: tuple[tuple[int, int], ...]


def draw_feature_unbind(feat: torch.Tensor, cfg: UnbindConfig, rng: np.random.Generator):
    H, W = feat.shape[-2:]
    mh = int(round(cfg.feature_shift_range * H))
    mw = int(round(cfg.feature_shift_range * W))
    dh, dw = int(rng.integers(-mh, mh + 1)), int(rng.integers(-mw, mw + 1))
    k = int(rng.integers(cfg.duplicate_min, cfg.duplicate_max + 1))
    return dh, dw, k


def feature_unbind(
    feat: torch.Tensor, cfg: UnbindConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, FeatureDraw]:
    """Shift one sample's (C, F, H, W) pose features and superimpose copies of
    the pose region at random distinct offsets."""
    if not cfg.enabled:
        raise InvalidArgumentError("feature_unbind called with unbind disabled")
    call_counts["feature_unbind"] += 1
    dh, dw, k = draw_feature_unbind(feat, cfg, rng)
    out = shift_grid(feat, dh, dw)
    box = locate_pose_region(out, cfg.region_tau)
    if box is None or k == 0:
        return out, FeatureDraw((dh, dw), ())
    H, W = out.shape[-2:]
    n_h, n_w = H - box.height + 1, W - box.width + 1
    k = min(k, n_h * n_w)
    flat = rng.choice(n_h * n_w, size=k, replace=False)
    offsets = tuple((int(i // n_w), int(i % n_w)) for i in flat)
    return superimpose(out, box, offsets), FeatureDraw((dh, dw), offsets)


def maybe_feature_unbind(feat: torch.Tensor, cfg: UnbindConfig, rngs, training: bool) -> torch.Tensor:
    """Batched wrapper: ``feat`` is (B, C, F, H, W) and ``rngs`` holds one stream per sample."""
    if not (training and cfg.enabled):
        return feat
    return torch.stack([feature_unbind(f, cfg, r)[0] for f, r in zip(feat, rngs)])
