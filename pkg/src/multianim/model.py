"""The full denoiser: text embedder + DiT base + animation condition branches."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import unbind as ub
from .backbone import DiT, DiTConfig, adapter_parameters, base_parameters, inject_lora, lora_modules
from .conditioning import (
    ConditionBranches,
    DropFlags,
    TextEmbedder,
    assemble,
    decode_latent,
    encode_latent,
    latent_bounds,
    latent_channels,
    text_features,
)
from .config import Config, UnbindConfig
from .diffusion import NoiseSchedule, sample_latent
from .errors import InvalidArgumentError
from .skeleton import rasterize
from .synthgen import Episode, TextVocab

PHASES = ("pretrain", "finetune")


@dataclass
class Conditions:
    """Batched animation conditions; any field may be None when unused."""

    text: torch.Tensor  # (B, L) token ids
    reference: torch.Tensor | None = None  # (B, C, 1, h, w) latent
    pose: torch.Tensor | None = None  # (B, F, H, W, 3) raster
    mask: torch.Tensor | None = None  # (B, H, W) union mask

    @property
    def batch(self) -> int:
        return int(self.text.shape[0])


class AnimationModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.dit_cfg = DiTConfig.from_model_config(m)
        self.factor = m.codec_factor
        self.text = TextEmbedder(32, m.text_width, m.text_len, m.text_heads)
        self.dit = DiT(self.dit_cfg)
        self.branches = ConditionBranches(
            m.width,
            latent_channels(m.codec_factor),
            self.dit_cfg.patch,
            m.pose_channels,
            tuple(m.pose_hidden),
            m.mask_hidden,
        )
        self.schedule = NoiseSchedule(cfg.diffusion.train_steps)
        self.phase = "pretrain"

    # -- phases -----------------------------------------------------------------
    def start_finetune(self) -> None:
        if self.phase == "finetune":
            return
        inject_lora(self.dit, self.cfg.model.lora_rank, self.cfg.model.lora_alpha)
        self.phase = "finetune"

    def base_parameters(self) -> dict[str, nn.Parameter]:
        """Weights of the pretrained text-to-video model (DiT base + text embedder)."""
        out = {f"dit.{n}": p for n, p in base_parameters(self.dit).items()}
        out.update({f"text.{n}": p for n, p in self.text.named_parameters()})
        return out

    def trainable_parameters(self, phase: str | None = None) -> dict[str, nn.Parameter]:
        """Pretrain: DiT base + text embedder. Finetune: adapters + condition branches only."""
        phase = phase or self.phase
        if phase not in PHASES:
            raise InvalidArgumentError(f"unknown phase {phase!r}")
        if phase == "pretrain":
            return self.base_parameters()
        out = {f"dit.{n}": p for n, p in adapter_parameters(self.dit).items()}
        out.update({f"branches.{n}": p for n, p in self.branches.named_parameters()})
        return out

    def freeze_for(self, phase: str | None = None) -> list[nn.Parameter]:
        trainable = self.trainable_parameters(phase)
        ids = {id(p) for p in trainable.values()}
        for p in self.parameters():
            p.requires_grad_(id(p) in ids)
        return list(trainable.values())

    def adapters(self):
        return lora_modules(self.dit)

    # -- forward ----------------------------------------------------------------
    def eps(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cond: Conditions,
        drop: DropFlags | None = None,
        *,
        unbind_cfg: UnbindConfig | None = None,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> torch.Tensor:
        """Noise estimate for latent ``x_t`` (B, C, F, h, w).

        Feature unbind runs only when ``unbind_cfg`` is enabled and ``self.training``.
        """
        drop = drop or DropFlags()
        dtype = self.dit.patch_embed.weight.dtype
        text = text_features(self.text, cond.text, drop.text)
        pose_feat = mask_feat = ref = None
        if cond.pose is not None:
            pose_feat = self.branches.pose_encoder(cond.pose.to(dtype))
            if unbind_cfg is not None:
                pose_feat = ub.maybe_feature_unbind(pose_feat, unbind_cfg, rngs, self.training)
        if cond.mask is not None:
            mask_feat = self.branches.mask_encoder(cond.mask.to(dtype))
        if cond.reference is not None:
            ref = cond.reference.to(dtype)
        bundle = assemble(
            self.dit,
            x_t.to(dtype),
            t,
            text,
            ref_latent=ref,
            pose_feat=pose_feat,
            mask_feat=mask_feat,
            branches=self.branches,
            drop=drop,
        )
        return self.dit(bundle)

    @torch.no_grad()
    def generate(
        self,
        cond: Conditions,
        frames: int,
        height: int,
        width: int,
        steps: int = 50,
        guidance: float = 2.0,
        seed: int = 0,
    ) -> torch.Tensor:
        """Sample videos (B, F, H, W, 3) in [0, 1].

        The unconditional branch drops text, pose and mask but keeps the
        reference; both branches run as one doubled batch.
        """
        was_training = self.training
        self.eval()
        b = cond.batch
        f = self.factor
        shape = (b, latent_channels(f), frames, height // f, width // f)
        both = Conditions(
            text=torch.cat([cond.text, cond.text]),
            reference=None if cond.reference is None else torch.cat([cond.reference, cond.reference]),
            pose=None if cond.pose is None else torch.cat([cond.pose, cond.pose]),
            mask=None if cond.mask is None else torch.cat([cond.mask, cond.mask]),
        )
        flags = torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)])
        drop2 = DropFlags(text=flags, pose=flags, mask=flags)
        cache: dict = {}

        def eps_fn(x, t, conditional):
            key = int(t[0])
            if key not in cache:
                cache.clear()
                out = self.eps(torch.cat([x, x]), torch.cat([t, t]), both, drop2)
                cache[key] = out.to(x.dtype)
            return cache[key][:b] if conditional else cache[key][b:]

        def eps_cond_only(x, t, conditional):
            return self.eps(x, t, cond, DropFlags()).to(x.dtype)

        d = self.cfg.diffusion
        fn = eps_cond_only if guidance == 1.0 else eps_fn
        bounds = None
        if d.clip_x0:
            lo, hi = latent_bounds(f)
            bounds = (lo.reshape(1, -1, 1, 1, 1), hi.reshape(1, -1, 1, 1, 1))
        z = sample_latent(fn, self.schedule, shape, steps, guidance, seed, bounds)
        self.train(was_training)
        video = decode_latent(z.to(torch.float64), f)
        return video.clamp(0.0, 1.0)


# -- batches -------------------------------------------------------------------------


class EpisodeStore:
    """In-memory training episodes (8-bit frames) with access counters.

    The counters record reads of reference, pose and mask data so tests can
    check that the text-to-video branch never touches them.
    """

    def __init__(self, episodes: Sequence[Episode]):
        if not episodes:
            raise InvalidArgumentError("empty episode set")
        self.gt = np.stack([np.round(e.gt_video * 255).astype(np.uint8) for e in episodes])
        self._masks = np.stack([e.union_mask for e in episodes])
        self._refs = np.stack([np.round(e.reference * 255).astype(np.uint8) for e in episodes])
        self.text = np.array([e.text for e in episodes], dtype=np.int64)
        self._driving = [e.driving for e in episodes]
        self.access = Counter()

    def __len__(self) -> int:
        return self.gt.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.gt.shape[2], self.gt.shape[3]

    def video(self, idx) -> np.ndarray:
        return self.gt[idx].astype(np.float32) / np.float32(255.0)

    def reference(self, idx) -> np.ndarray:
        self.access["reference"] += 1
        return self._refs[idx].astype(np.float32) / np.float32(255.0)

    def mask(self, idx) -> np.ndarray:
        self.access["mask"] += 1
        return self._masks[idx]

    def driving(self, idx):
        self.access["pose"] += 1
        return [self._driving[i] for i in np.atleast_1d(idx)]


def animation_conditions(
    references: np.ndarray,
    drivings,
    masks: np.ndarray | None,
    text: np.ndarray,
    factor: int,
    *,
    unbind_cfg: UnbindConfig | None = None,
    rngs: Sequence[np.random.Generator] | None = None,
    training: bool = False,
) -> Conditions:
    """Rasterize driving poses (after pose unbind when training) and encode the references."""
    h, w = references.shape[1:3]
    rasters = []
    for i, seq in enumerate(drivings):
        if unbind_cfg is not None:
            seq = ub.maybe_pose_unbind(seq, unbind_cfg, rngs[i] if rngs else None, training)
        rasters.append(rasterize(seq, h, w))
    ref = encode_latent(references[:, None], factor).to(torch.float32)
    return Conditions(
        text=torch.as_tensor(np.asarray(text), dtype=torch.long),
        reference=ref,
        pose=torch.from_numpy(np.stack(rasters)),
        mask=None if masks is None else torch.from_numpy(np.asarray(masks, dtype=np.float32)),
    )


def episode_conditions(episodes: Sequence[Episode], factor: int, use_mask: bool = True,
                       use_text: bool = True, text_len: int = 8) -> Conditions:
    """Inference-time conditions for a list of episodes (no augmentation)."""
    text = np.array(
        [e.text if use_text else TextVocab.null(text_len) for e in episodes], dtype=np.int64
    )
    masks = np.stack([e.union_mask for e in episodes]) if use_mask else None
    return animation_conditions(
        np.stack([e.reference for e in episodes]), [e.driving for e in episodes], masks, text, factor
    )
