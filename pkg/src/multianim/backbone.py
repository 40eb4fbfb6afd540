"""A small diffusion transformer over latent-grid tokens, plus low-rank adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import Bundle, unpatchify
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class DiTConfig:
    latent_channels: int = 48
    width: int = 192
    depth: int = 6
    heads: int = 6
    patch: tuple[int, int, int] = (1, 2, 2)
    mlp_ratio: float = 4.0
    text_width: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise InvalidArgumentError(f"width {self.width} not divisible by {self.heads} heads")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise InvalidArgumentError(f"bad patch {self.patch}")

    @classmethod
    def from_model_config(cls, m) -> "DiTConfig":
        return cls(
            latent_channels=3 * m.codec_factor**2,
            width=m.width,
            depth=m.depth,
            heads=m.heads,
            patch=(m.patch_t, m.patch_h, m.patch_w),
            mlp_ratio=m.mlp_ratio,
            text_width=m.text_width,
        )


def sinusoid(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(N,) values -> (N, dim) [cos | sin] features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = x.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def position_embedding(positions: torch.Tensor, width: int) -> torch.Tensor:
    """Fixed sin/cos embedding of (frame, row, col) token positions."""
    each = (width // 6) * 2
    parts = [sinusoid(positions[:, i], each, 100.0) for i in range(3)]
    emb = torch.cat(parts, dim=-1)
    return F.pad(emb, (0, width - emb.shape[-1]))


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * x A^T B^T`` with A (r, d_in) and B (d_out, r); B starts at zero."""

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        if rank < 1:
            raise InvalidArgumentError("LoRA rank must be >= 1")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def weight(self):
        return self.base.weight

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scaling


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, context_width: int | None = None):
        super().__init__()
        ctx = context_width or width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(ctx, width)
        self.v = nn.Linear(ctx, width)
        self.o = nn.Linear(width, width)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def probs(self, x: torch.Tensor, context: torch.Tensor | None = None, key_mask=None) -> torch.Tensor:
        """Explicit (B, heads, N, M) attention weights."""
        ctx = x if context is None else context
        q, k = self._split(self.q(x)), self._split(self.k(ctx))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, key_mask=None) -> torch.Tensor:
        """``key_mask`` (B, M) bool marks the context tokens that may be attended to."""
        ctx = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        b, h, n, dh = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, h * dh))


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=1e-6)
        self.cross = Attention(width, heads)
        self.norm3 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.ada = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, text, temb, key_mask=None):
        s1, c1, g1, s2, c2, g2 = self.ada(F.silu(temb)).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), s1, c1), key_mask=key_mask)
        x = x + self.cross(self.norm2(x), text)
        x = x + g2[:, None] * self.mlp(modulate(self.norm3(x), s2, c2))
        return x


class DiT(nn.Module):
    """Predicts the noise at the noisy-token positions of a :class:`Bundle`.

    Self-attention spans every token (reference, noisy, pose); cross-attention
    reads the text features; the timestep modulates each block's norms.
    """

    def __init__(self, cfg: DiTConfig = DiTConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch = tuple(cfg.patch)
        d = cfg.width
        patch_dim = cfg.latent_channels * math.prod(cfg.patch)
        self.patch_embed = nn.Linear(patch_dim, d)
        self.noisy_type = nn.Parameter(torch.zeros(d))
        self.text_proj = nn.Linear(cfg.text_width, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, patch_dim)
        # Timestep-gated per-channel skip from the noisy latent to the output.
        # The token width can be smaller than the patch dimension, so without
        # it the noise cannot pass through the residual stream.
        self.skip = nn.Linear(d, cfg.latent_channels)
        for m in (self.ada_out, self.out, self.skip):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, bundle: Bundle) -> torch.Tensor:
        x = bundle.tokens
        b, n, d = x.shape
        if d != self.cfg.width:
            raise InvalidArgumentError(f"token width {d} != model width {self.cfg.width}")
        if bundle.positions.shape[0] != n or bundle.noisy_slice.stop > n:
            raise InvalidArgumentError("bundle token count does not match its layout")
        if bundle.text.shape[-1] != self.cfg.text_width:
            raise InvalidArgumentError(f"text width {bundle.text.shape[-1]} != {self.cfg.text_width}")
        dtype = self.patch_embed.weight.dtype
        x = x + position_embedding(bundle.positions, d).to(dtype)
        temb = self.time_mlp(sinusoid(bundle.t, d).to(dtype))
        text = self.text_proj(bundle.text.to(dtype))
        if bundle.key_mask is not None and bundle.key_mask.shape != (b, n):
            raise InvalidArgumentError("bundle key mask does not match its tokens")
        for blk in self.blocks:
            x = blk(x, text, temb, bundle.key_mask)
        shift, scale = self.ada_out(F.silu(temb)).chunk(2, dim=-1)
        x = self.out(modulate(self.norm_out(x[:, bundle.noisy_slice]), shift, scale))
        out = unpatchify(x, bundle.grid, self.cfg.latent_channels, self.patch)
        if bundle.latent is not None:
            if bundle.latent.shape != out.shape:
                raise InvalidArgumentError(f"bundle latent {tuple(bundle.latent.shape)} != output {tuple(out.shape)}")
            gate = self.skip(F.silu(temb))
            out = out + gate[:, :, None, None, None] * bundle.latent.to(dtype)
        return out


LORA_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.o", "cross.q", "cross.k", "cross.v", "cross.o")


def inject_lora(dit: DiT, rank: int = 8, alpha: float = 16.0) -> dict[str, LoRALinear]:
    """Wrap every self/cross-attention projection in a :class:`LoRALinear`."""
    adapters = {}
    for i, blk in enumerate(dit.blocks):
        for target in LORA_TARGETS:
            owner_name, proj = target.split(".")
            owner = getattr(blk, owner_name)
            layer = getattr(owner, proj)
            if isinstance(layer, LoRALinear):
                raise InvalidArgumentError("LoRA already injected")
            wrapped = LoRALinear(layer, rank, alpha)
            setattr(owner, proj, wrapped)
            adapters[f"blocks.{i}.{target}"] = wrapped
    return adapters


def lora_modules(model: nn.Module) -> dict[str, LoRALinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def merge_lora_weights(
    base: dict[str, torch.Tensor], adapters: dict[str, tuple[torch.Tensor, torch.Tensor]], alpha: float
) -> dict[str, torch.Tensor]:
    """``W' = W + (alpha / r) B A`` for each ``name -> (A, B)``; base keys are ``name + ".weight"``."""
    merged = dict(base)
    for name, (A, B) in adapters.items():
        key = f"{name}.weight"
        if key not in base:
            raise InvalidArgumentError(f"no base weight for adapter {name}")
        W = base[key]
        r = A.shape[0]
        if B.shape[1] != r:
            raise InvalidArgumentError(f"{name}: rank mismatch, A has {r} rows but B has {B.shape[1]} columns")
        if A.shape[1] != W.shape[1] or B.shape[0] != W.shape[0]:
            raise InvalidArgumentError(f"{name}: adapter shapes {tuple(A.shape)}, {tuple(B.shape)} incompatible with {tuple(W.shape)}")
        merged[key] = W + (alpha / r) * (B @ A)
    return merged


@torch.no_grad()
def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight in place and unwrap it."""
    for name, m in list(lora_modules(model).items()):
        merged = merge_lora_weights(
            {"w.weight": m.base.weight}, {"w": (m.lora_A, m.lora_B)}, m.alpha
        )["w.weight"]
        m.base.weight.copy_(merged)
        parent_name, _, attr = name.rpartition(".")
        setattr(model.get_submodule(parent_name), attr, m.base)
    return model


def base_parameters(dit: DiT) -> dict[str, nn.Parameter]:
    """DiT parameters excluding adapters."""
    return {n: p for n, p in dit.named_parameters() if "lora_" not in n}


def adapter_parameters(module: nn.Module) -> dict[str, nn.Parameter]:
    return {n: p for n, p in module.named_parameters() if "lora_" in n}
