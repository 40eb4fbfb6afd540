"""Condition encoders and assembly of the denoiser's token sequence.

Latent grids are tensors shaped (B, C, F, H, W). The latent codec is an exact
space-to-channel fold (4x4 pixel blocks into 48 channels) with a fixed
per-channel affine normalization, so decoding is the exact inverse of encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgumentError

# Per-RGB-channel pixel statistics of the synthetic generator (60 default
# episodes); the codec maps them to zero mean and unit variance.
PIXEL_MEAN = (0.175, 0.166, 0.149)
PIXEL_STD = (0.114, 0.112, 0.122)


# -- codec -------------------------------------------------------------------------


def latent_channels(factor: int = 4) -> int:
    return 3 * factor * factor


def latent_affine(factor: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-latent-channel ``(scale, offset)`` in float64, shape (C,)."""
    mean = torch.tensor(PIXEL_MEAN, dtype=torch.float64).repeat_interleave(factor * factor)
    std = torch.tensor(PIXEL_STD, dtype=torch.float64).repeat_interleave(factor * factor)
    return 1.0 / std, -mean / std


def latent_bounds(factor: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """Latent values of black and white pixels per channel, shape (C,)."""
    scale, offset = latent_affine(factor)
    return offset, offset + scale


def _channel_view(v: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, 1, 1, 1)


def encode_latent(video, factor: int = 4, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """(..., F, H, W, 3) pixels in [0, 1] -> (..., 3*factor^2, F, H/factor, W/factor).

    Channel index is ``c * factor^2 + dy * factor + dx``. Computed in float64 so
    that ``decode_latent(encode_latent(v))`` reproduces float32 input bit for bit.
    """
    v = torch.as_tensor(np.asarray(video) if not torch.is_tensor(video) else video)
    if v.dim() < 4 or v.shape[-1] != 3:
        raise InvalidArgumentError(f"expected (..., F, H, W, 3) video, got {tuple(v.shape)}")
    *lead, f, h, w, _ = v.shape
    if h % factor or w % factor:
        raise InvalidArgumentError(f"frame size {h}x{w} not divisible by {factor}")
    x = v.to(dtype).reshape(*lead, f, h // factor, factor, w // factor, factor, 3)
    n = len(lead)
    # -> (..., 3, fy, fx, F, h', w')
    perm = list(range(n)) + [n + 5, n + 2, n + 4, n + 0, n + 1, n + 3]
    x = x.permute(*perm).reshape(*lead, 3 * factor * factor, f, h // factor, w // factor)
    scale, offset = latent_affine(factor)
    return x * _channel_view(scale).to(dtype) + _channel_view(offset).to(dtype)


def decode_latent(g: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Exact inverse of :func:`encode_latent`; returns float32 (..., F, H, W, 3)."""
    if g.dim() < 4 or g.shape[-4] != 3 * factor * factor:
        raise InvalidArgumentError(f"expected (..., {3 * factor * factor}, F, h, w), got {tuple(g.shape)}")
    *lead, c, f, h, w = g.shape
    scale, offset = latent_affine(factor)
    x = (g.to(torch.float64) - _channel_view(offset)) / _channel_view(scale)
    x = x.reshape(*lead, 3, factor, factor, f, h, w)
    n = len(lead)
    # (..., 3, fy, fx, F, h, w) -> (..., F, h, fy, w, fx, 3)
    perm = list(range(n)) + [n + 3, n + 4, n + 1, n + 5, n + 2, n + 0]
    x = x.permute(*perm).reshape(*lead, f, h * factor, w * factor, 3)
    return x.to(torch.float32)


# -- patchify ----------------------------------------------------------------------


def patchify(x: torch.Tensor, patch: tuple[int, int, int]) -> torch.Tensor:
    """(B, C, F, H, W) -> (B, N, C*pt*ph*pw) with tokens ordered (f, h, w)."""
    b, c, f, h, w = x.shape
    pt, ph, pw = patch
    if f % pt or h % ph or w % pw:
        raise InvalidArgumentError(f"grid {(f, h, w)} not divisible by patch {patch}")
    x = x.reshape(b, c, f // pt, pt, h // ph, ph, w // pw, pw)
    x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, (f // pt) * (h // ph) * (w // pw), c * pt * ph * pw)


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int, int], channels: int, patch) -> torch.Tensor:
    b = tokens.shape[0]
    gf, gh, gw = grid
    pt, ph, pw = patch
    x = tokens.reshape(b, gf, gh, gw, channels, pt, ph, pw)
    x = x.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(b, channels, gf * pt, gh * ph, gw * pw)


def grid_positions(gf: int, gh: int, gw: int, frame_offset: int = 0) -> torch.Tensor:
    f, h, w = torch.meshgrid(
        torch.arange(gf) + frame_offset, torch.arange(gh), torch.arange(gw), indexing="ij"
    )
    return torch.stack([f.flatten(), h.flatten(), w.flatten()], dim=1)


# -- encoders ----------------------------------------------------------------------


def _activation(name: str) -> nn.Module:
    if name == "silu":
        return nn.SiLU()
    if name == "identity":
        return nn.Identity()
    raise InvalidArgumentError(f"unknown activation {name!r}")


class PoseShiftEncoder(nn.Module):
    """Stacked 3D convolutions from a pose raster to the latent grid.

    Spatial downsampling by 4 happens in the first two stages; the last stage is
    zero-initialized so a fresh encoder emits exactly zero. No biases, so an
    empty raster also maps to zero everywhere.
    """

    def __init__(self, out_channels: int, hidden=(16, 32), activation: str = "silu"):
        super().__init__()
        h1, h2 = hidden
        self.conv1 = nn.Conv3d(3, h1, 3, stride=(1, 2, 2), padding=1, bias=False)
        self.conv2 = nn.Conv3d(h1, h2, 3, stride=(1, 2, 2), padding=1, bias=False)
        self.conv3 = nn.Conv3d(h2, out_channels, 3, stride=1, padding=1, bias=False)
        self.act = _activation(activation)
        nn.init.zeros_(self.conv3.weight)

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        """raster (B, F, H, W, 3) -> (B, D, F, H/4, W/4)."""
        if raster.dim() != 5 or raster.shape[-1] != 3:
            raise InvalidArgumentError(f"expected (B, F, H, W, 3) raster, got {tuple(raster.shape)}")
        if raster.shape[2] % 4 or raster.shape[3] % 4:
            raise InvalidArgumentError("raster height and width must be divisible by 4")
        x = raster.permute(0, 4, 1, 2, 3).to(self.conv1.weight.dtype)
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return self.conv3(x)


class MaskEncoder(nn.Module):
    """Two stride-2 2D convolutions; output has the latent channel count so it
    can be summed onto the noisy latent. Last stage zero-initialized."""

    def __init__(self, out_channels: int, hidden: int = 16, activation: str = "silu"):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, stride=2, padding=1, bias=False)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, stride=2, padding=1, bias=False)
        self.act = _activation(activation)
        nn.init.zeros_(self.conv2.weight)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        """mask (B, H, W) -> (B, C, H/4, W/4)."""
        if mask.dim() != 3:
            raise InvalidArgumentError(f"expected (B, H, W) mask, got {tuple(mask.shape)}")
        if mask.shape[1] % 4 or mask.shape[2] % 4:
            raise InvalidArgumentError("mask height and width must be divisible by 4")
        x = mask[:, None].to(self.conv1.weight.dtype)
        return self.conv2(self.act(self.conv1(x)))


class TextEmbedder(nn.Module):
    """Token table + learned positions + one self-attention block."""

    def __init__(self, vocab_size: int = 32, width: int = 64, length: int = 8, heads: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.length = length
        self.tokens = nn.Embedding(vocab_size, width)  # unit-variance rows, the torch default
        self.pos = nn.Parameter(torch.randn(length, width) * 0.02)
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.norm_out = nn.LayerNorm(width)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, L) -> (B, L, width)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() != 2 or ids.shape[1] != self.length:
            raise InvalidArgumentError(f"expected (B, {self.length}) token ids, got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise InvalidArgumentError("token id outside the vocabulary")
        x = self.tokens(ids) + self.pos
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return self.norm_out(x)


class ConditionBranches(nn.Module):
    """Everything the animation fine-tune adds on top of the text-to-video base:
    pose encoder and its token projection, mask encoder, and the token-type
    embeddings of the reference and pose segments."""

    def __init__(self, width: int, latent_ch: int, patch, pose_channels: int = 0, pose_hidden=(16, 32),
                 mask_hidden: int = 16, activation: str = "silu"):
        super().__init__()
        pose_channels = pose_channels or width
        self.patch = tuple(patch)
        self.pose_encoder = PoseShiftEncoder(pose_channels, pose_hidden, activation)
        self.pose_tokens = nn.Linear(pose_channels * int(np.prod(patch)), width, bias=False)
        self.mask_encoder = MaskEncoder(latent_ch, mask_hidden, activation)
        self.ref_type = nn.Parameter(torch.randn(width) * 0.02)
        self.pose_type = nn.Parameter(torch.randn(width) * 0.02)


# -- assembly ----------------------------------------------------------------------


@dataclass
class DropFlags:
    """Which conditions to remove. ``text``/``pose``/``mask`` are per-sample
    boolean tensors (or plain bools); ``reference`` applies to the whole batch
    and removes the reference tokens altogether."""

    text: torch.Tensor | bool = False
    pose: torch.Tensor | bool = False
    mask: torch.Tensor | bool = False
    reference: bool = False

    @classmethod
    def all(cls) -> "DropFlags":
        return cls(True, True, True, True)

    @classmethod
    def unconditional(cls) -> "DropFlags":
        """Guidance branch: no text, pose or mask; the reference stays."""
        return cls(True, True, True, False)

    def per_sample(self, name: str, batch: int) -> torch.Tensor:
        v = getattr(self, name)
        if torch.is_tensor(v):
            if v.shape != (batch,):
                raise InvalidArgumentError(f"drop flag {name} has shape {tuple(v.shape)}, batch is {batch}")
            return v.bool()
        return torch.full((batch,), bool(v))


@dataclass
class Bundle:
    """Token sequence fed to the denoiser: [reference | noisy | pose]."""

    tokens: torch.Tensor  # (B, N, D)
    positions: torch.Tensor  # (N, 3) frame/row/col indices
    noisy_start: int
    grid: tuple[int, int, int]  # token grid of the noisy segment
    text: torch.Tensor  # (B, L, D_text)
    t: torch.Tensor  # (B,)
    segments: dict
    key_mask: torch.Tensor | None = None  # (B, N) bool, False hides a token from attention
    latent: torch.Tensor | None = None  # (B, C, F, h, w) noisy latent before the mask addition

    @property
    def n_noisy(self) -> int:
        return int(np.prod(self.grid))

    @property
    def noisy_slice(self) -> slice:
        return slice(self.noisy_start, self.noisy_start + self.n_noisy)


def text_features(embedder: TextEmbedder, ids: torch.Tensor, drop: torch.Tensor | bool = False) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    drop = drop if torch.is_tensor(drop) else torch.full((ids.shape[0],), bool(drop))
    ids = torch.where(drop[:, None], torch.zeros_like(ids), ids)
    return embedder(ids)


def assemble(
    dit,
    noisy: torch.Tensor,
    t: torch.Tensor,
    text: torch.Tensor,
    *,
    ref_latent: torch.Tensor | None = None,
    pose_feat: torch.Tensor | None = None,
    mask_feat: torch.Tensor | None = None,
    branches: ConditionBranches | None = None,
    drop: DropFlags | None = None,
) -> Bundle:
    """Build the token sequence.

    ``mask_feat`` (B, C, h, w) is added to every frame of ``noisy`` before
    patchifying; ``ref_latent`` (B, C, 1, h, w) is prepended and ``pose_feat``
    (B, Cp, F, h, w) appended, each with its token-type embedding. A ``None``
    condition is absent from the sequence; a dropped pose keeps its token slots
    but zeroes them and hides them from attention through ``key_mask``, which
    is equivalent to leaving the segment out. ``text`` is the already-embedded
    prompt.
    """
    drop = drop or DropFlags()
    b, c, f, h, w = noisy.shape
    latent = noisy
    patch = dit.patch
    if (ref_latent is not None or pose_feat is not None or mask_feat is not None) and branches is None:
        raise InvalidArgumentError("condition branches are required for reference/pose/mask inputs")
    if mask_feat is not None:
        if mask_feat.shape != (b, c, h, w):
            raise InvalidArgumentError(f"mask features {tuple(mask_feat.shape)} do not match latent {(b, c, h, w)}")
        keep = (~drop.per_sample("mask", b)).to(noisy.dtype)
        noisy = noisy + keep[:, None, None, None, None] * mask_feat[:, :, None]
    grid = (f // patch[0], h // patch[1], w // patch[2])
    pieces, positions, segments = [], [], {}
    key_mask = None
    start = 0
    if ref_latent is not None and not drop.reference:
        if ref_latent.shape != (b, c, 1, h, w):
            raise InvalidArgumentError(f"reference latent {tuple(ref_latent.shape)} does not match {(b, c, 1, h, w)}")
        ref = ref_latent.expand(b, c, patch[0], h, w)
        tok = dit.patch_embed(patchify(ref, patch)) + branches.ref_type
        pieces.append(tok)
        positions.append(grid_positions(1, grid[1], grid[2]))
        segments["reference"] = (start, tok.shape[1])
        start += tok.shape[1]
    tok = dit.patch_embed(patchify(noisy, patch)) + dit.noisy_type
    pieces.append(tok)
    positions.append(grid_positions(*grid))
    segments["noisy"] = (start, tok.shape[1])
    noisy_start = start
    start += tok.shape[1]
    if pose_feat is not None:
        if pose_feat.shape[0] != b or pose_feat.shape[2:] != (f, h, w):
            raise InvalidArgumentError(f"pose features {tuple(pose_feat.shape)} do not match latent grid {(f, h, w)}")
        tok = branches.pose_tokens(patchify(pose_feat, patch)) + branches.pose_type
        keep = ~drop.per_sample("pose", b)
        tok = tok * keep.to(tok.dtype)[:, None, None]
        pieces.append(tok)
        positions.append(grid_positions(*grid))
        segments["pose"] = (start, tok.shape[1])
        if not keep.all():
            key_mask = torch.ones(b, start + tok.shape[1], dtype=torch.bool)
            key_mask[:, start:] = keep[:, None]
    return Bundle(
        tokens=torch.cat(pieces, dim=1),
        positions=torch.cat(positions, dim=0),
        noisy_start=noisy_start,
        grid=grid,
        text=text,
        t=torch.as_tensor(t, dtype=torch.long).reshape(b),
        segments=segments,
        key_mask=key_mask,
        latent=latent,
    )


def token_count(frames: int, grid_h: int, grid_w: int, with_reference: bool = True, with_pose: bool = True) -> int:
    per_frame = grid_h * grid_w
    return frames * per_frame + (per_frame if with_reference else 0) + (frames * per_frame if with_pose else 0)
