"""Network building blocks: conditional U-Net denoiser and class-token tables.

The denoiser predicts the noise added to a latent, conditioned on the
timestep (sinusoidal embedding -> FiLM) and on a small matrix of
conditioning tokens (cross-attention). Token matrices come either from a
per-class table learned during pretraining or from per-image optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class DenoiserArch:
    latent_channels: int = 4
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    cond_tokens: int = 8
    cond_dim: int = 64
    attn_heads: int = 2
    time_dim: int = 64

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "channel_mult": list(self.channel_mult),
            "num_res_blocks": self.num_res_blocks,
            "cond_tokens": self.cond_tokens,
            "cond_dim": self.cond_dim,
            "attn_heads": self.attn_heads,
            "time_dim": self.time_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserArch":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return DenoiserArch(**d)


def _groups(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class TimestepEmbedding(nn.Module):
    """Sinusoidal position embedding of the diffusion step, then a small MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb)


class TokenCrossAttention(nn.Module):
    """Cross-attention from spatial positions onto the conditioning tokens."""

    def __init__(self, channels: int, cond_dim: int, heads: int):
        super().__init__()
        assert channels % heads == 0
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(cond_dim, channels)
        self.v = nn.Linear(cond_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.q(seq).reshape(b, h * w, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(cond).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(cond).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ResBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU and FiLM timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch * 2)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(t_emb))[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CondUNet(nn.Module):
    """Small two-level U-Net over latents with token cross-attention.

    forward(z_t, t, cond) -> predicted noise, same shape as z_t.
    cond has shape (B, L, D) with (L, D) = (arch.cond_tokens, arch.cond_dim).
    """

    def __init__(self, arch: DenoiserArch = DenoiserArch()):
        super().__init__()
        self.arch = arch
        ch = [arch.base_channels * m for m in arch.channel_mult]
        self.time_embed = TimestepEmbedding(arch.time_dim)
        self.stem = nn.Conv2d(arch.latent_channels, ch[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = ch[0]
        for level, c in enumerate(ch):
            for _ in range(arch.num_res_blocks):
                self.down_res.append(ResBlock(prev, c, arch.time_dim))
                self.down_attn.append(TokenCrossAttention(c, arch.cond_dim, arch.attn_heads))
                prev = c
            if level < len(ch) - 1:
                self.downsamplers.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.mid = ResBlock(prev, prev, arch.time_dim)
        self.mid_attn = TokenCrossAttention(prev, arch.cond_dim, arch.attn_heads)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(ch))):
            c = ch[level]
            for _ in range(arch.num_res_blocks):
                # concat skip from the matching down block
                self.up_res.append(ResBlock(prev + c, c, arch.time_dim))
                self.up_attn.append(TokenCrossAttention(c, arch.cond_dim, arch.attn_heads))
                prev = c
            if level > 0:
                self.upsamplers.append(nn.ConvTranspose2d(c, ch[level - 1], 2, stride=2))
                prev = ch[level - 1]

        self.out_norm = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.out_conv = nn.Conv2d(ch[0], arch.latent_channels, 3, padding=1)

    def forward(self, z_t: Tensor, t: Tensor | int, cond: Tensor) -> Tensor:
        if z_t.dim() == 3:
            return self.forward(z_t[None], t, cond[None] if cond.dim() == 2 else cond)[0]
        b = z_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        elif t.dim() == 0:
            t = t.expand(b)
        if cond.dim() == 2:
            cond = cond[None].expand(b, -1, -1)
        t_emb = self.time_embed(t)

        h = self.stem(z_t)
        skips = []
        res_i = 0
        n_levels = len(self.arch.channel_mult)
        for level in range(n_levels):
            for _ in range(self.arch.num_res_blocks):
                h = self.down_res[res_i](h, t_emb)
                h = self.down_attn[res_i](h, cond)
                skips.append(h)
                res_i += 1
            if level < n_levels - 1:
                h = self.downsamplers[level](h)

        h = self.mid(h, t_emb)
        h = self.mid_attn(h, cond)

        res_i = 0
        for level in reversed(range(n_levels)):
            for _ in range(self.arch.num_res_blocks):
                h = torch.cat([h, skips.pop()], dim=1)
                h = self.up_res[res_i](h, t_emb)
                h = self.up_attn[res_i](h, cond)
                res_i += 1
            if level > 0:
                h = self.upsamplers[n_levels - 1 - level](h)

        return self.out_conv(F.silu(self.out_norm(h)))


class ClassConditioner(nn.Module):
    """Learned conditioning tokens: one (L, D) matrix per class plus a null token.

    The null token is what the denoiser sees when conditioning is dropped
    during pretraining; it doubles as the fallback unconditional input.
    """

    def __init__(self, num_classes: int, tokens: int = 8, dim: int = 64, init_std: float = 0.02):
        super().__init__()
        self.num_classes = num_classes
        self.tokens = tokens
        self.dim = dim
        self.class_tokens = nn.Parameter(torch.randn(num_classes, tokens, dim) * init_std)
        self.null_token = nn.Parameter(torch.randn(tokens, dim) * init_std)

    def forward(self, labels: Tensor, drop_mask: Tensor | None = None) -> Tensor:
        cond = self.class_tokens[labels]
        if drop_mask is not None and drop_mask.any():
            cond = torch.where(drop_mask[:, None, None], self.null_token[None], cond)
        return cond

    def class_token(self, label: int) -> Tensor:
        return self.class_tokens[label].detach().clone()

    def null(self) -> Tensor:
        return self.null_token.detach().clone()
