"""Location-conditioned ESRGAN-style generator.

Shallow conv -> RRDB trunk -> log2(scale) upsample stages, each followed by
residual self-attention and residual cross-attention against location tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError
from .location import LocationEmbedding, TokenProjector

WINDOW = 8
FULL_ATTENTION_MAX_SIDE = 64
RESIDUAL_BETA = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    num_features: int = 32
    grow_channels: int = 16
    num_blocks: int = 3
    scale_factor: int = 8
    attn_enabled: bool = True
    cond_enabled: bool = True
    n_loc: int = 4
    d_token: int = 32
    attn_heads: int = 4
    embed_dim: int = 256
    max_output_side: int = 4096

    def __post_init__(self):
        if self.scale_factor not in (2, 4, 8):
            raise ConfigError(f"scale_factor must be 2, 4 or 8, got {self.scale_factor}")
        if self.num_features % self.attn_heads:
            raise ConfigError("num_features must be divisible by attn_heads")
        if min(self.num_features, self.grow_channels, self.n_loc, self.d_token) < 1 or self.num_blocks < 0:
            raise ConfigError("generator widths and counts must be positive")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.scale_factor))

    @classmethod
    def toy(cls, **overrides) -> "GeneratorConfig":
        return replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides) -> "GeneratorConfig":
        base = cls(num_features=256, grow_channels=128, num_blocks=30, d_token=64)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def receptive_radius(cfg: GeneratorConfig) -> int:
    """Receptive-field radius in LR pixels of the convolutional path.

    Counts the shallow conv, 15 convs per RRDB, the trunk conv, one conv per
    upsample stage and the output conv (the last two at fractional LR pixels),
    plus one pixel for nearest-neighbour rounding.
    """
    r = 1.0 + 15 * cfg.num_blocks + 1.0
    for k in range(1, cfg.num_stages + 1):
        r += 1.0 / 2**k
    r += 1.0 / cfg.scale_factor
    return math.ceil(r) + 1


def _scaled_kaiming(module: nn.Module, scale: float) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0.2)
            m.weight.data.mul_(scale)
            nn.init.zeros_(m.bias)


class DenseBlock(nn.Module):
    def __init__(self, channels: int, grow: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * grow, grow if i < 4 else channels, 3, 1, 1) for i in range(5)
        )

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for i, conv in enumerate(self.convs):
            out = conv(torch.cat(feats, 1))
            if i < 4:
                feats.append(F.leaky_relu(out, 0.2))
        return x + RESIDUAL_BETA * out


class RRDB(nn.Module):
    def __init__(self, channels: int, grow: int):
        super().__init__()
        self.blocks = nn.Sequential(*(DenseBlock(channels, grow) for _ in range(3)))

    def forward(self, x: Tensor) -> Tensor:
        return x + RESIDUAL_BETA * self.blocks(x)


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: Optional[Tensor] = None) -> Tensor:
    """Multi-head softmax attention. q: (B, Lq, C), k/v: (B, Lk, C)."""
    b, lq, c = q.shape
    dh = c // heads
    q = q.reshape(b, lq, heads, dh).transpose(1, 2)
    k = k.reshape(b, k.shape[1], heads, dh).transpose(1, 2)
    v = v.reshape(b, v.shape[1], heads, dh).transpose(1, 2)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    return out.transpose(1, 2).reshape(b, lq, c)


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention over spatial positions.

    Attention is global while the larger spatial side is at most 64 and
    restricted to non-overlapping 8x8 windows beyond that.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        t = self.norm(x.permute(0, 2, 3, 1))
        if max(h, w) <= FULL_ATTENTION_MAX_SIDE:
            q, k, v = self.qkv(t.reshape(b, h * w, c)).chunk(3, dim=-1)
            out = _attend(q, k, v, self.heads).reshape(b, h, w, c)
        else:
            out = self._windowed(t)
        return self.proj(out).permute(0, 3, 1, 2)

    def _windowed(self, t: Tensor) -> Tensor:
        b, h, w, c = t.shape
        ph, pw = (-h) % WINDOW, (-w) % WINDOW
        valid = torch.ones(b, h, w, dtype=torch.bool)
        if ph or pw:
            t = F.pad(t, (0, 0, 0, pw, 0, ph))
            valid = F.pad(valid, (0, pw, 0, ph), value=False)
        hp, wp = h + ph, w + pw
        nh, nw = hp // WINDOW, wp // WINDOW

        def split(z):
            z = z.reshape(b, nh, WINDOW, nw, WINDOW, *z.shape[3:]).transpose(2, 3)
            return z.reshape(b * nh * nw, WINDOW * WINDOW, *z.shape[5:])

        q, k, v = self.qkv(split(t)).chunk(3, dim=-1)
        mask = split(valid) if (ph or pw) else None
        out = _attend(q, k, v, self.heads, mask)
        out = out.reshape(b, nh, nw, WINDOW, WINDOW, c).transpose(2, 3).reshape(b, hp, wp, c)
        return out[:, :h, :w]


class CrossAttention(nn.Module):
    """Image features as queries, location tokens as keys and values."""

    def __init__(self, channels: int, d_token: int, heads: int):
        super().__init__()
        self.heads, self.d_token = heads, d_token
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(d_token, channels)
        self.v = nn.Linear(d_token, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: Tensor, tokens: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if tokens.dim() != 3 or tokens.shape[0] != b or tokens.shape[2] != self.d_token:
            raise ConfigError(
                f"tokens must be (batch={b}, n_loc, {self.d_token}), got {tuple(tokens.shape)}"
            )
        q = self.q(self.norm(x.permute(0, 2, 3, 1)).reshape(b, h * w, c))
        out = _attend(q, self.k(tokens), self.v(tokens), self.heads)
        return self.proj(out).reshape(b, h, w, c).permute(0, 3, 1, 2)


class UpsampleStage(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.num_features
        self.conv = nn.Conv2d(c, c, 3, 1, 1)
        self.self_attn = SelfAttention(c, cfg.attn_heads) if cfg.attn_enabled else None
        self.cross_attn = CrossAttention(c, cfg.d_token, cfg.attn_heads) if cfg.cond_enabled else None

    def forward(self, x: Tensor, tokens: Optional[Tensor] = None) -> Tensor:
        if (tokens is not None) != (self.cross_attn is not None):
            raise ConfigError("tokens must be given exactly when conditioning is enabled")
        x = F.leaky_relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")), 0.2)
        if self.self_attn is not None:
            x = x + self.self_attn(x)
        if self.cross_attn is not None:
            x = x + self.cross_attn(x, tokens)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.num_features
        self.shallow = nn.Conv2d(3, c, 3, 1, 1)
        self.trunk = nn.Sequential(*(RRDB(c, cfg.grow_channels) for _ in range(cfg.num_blocks)))
        self.trunk_conv = nn.Conv2d(c, c, 3, 1, 1)
        self.stages = nn.ModuleList(UpsampleStage(cfg) for _ in range(cfg.num_stages))
        self.head = nn.Conv2d(c, 3, 3, 1, 1)
        self.tokens = TokenProjector(cfg.embed_dim, cfg.n_loc, cfg.d_token) if cfg.cond_enabled else None
        _scaled_kaiming(self.trunk, 0.1)

    def extract_shallow(self, lr: Tensor) -> Tensor:
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) input, got {tuple(lr.shape)}")
        return self.shallow(lr)

    def rrdb_forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.cfg.num_features:
            raise ConfigError(f"trunk expects {self.cfg.num_features} channels, got {f.shape[1]}")
        return f + self.trunk_conv(self.trunk(f))

    def project_tokens(self, embedding: Optional[Tensor], batch: int) -> Optional[Tensor]:
        if self.tokens is None:
            return None
        if embedding is None:
            raise InputError("a location embedding is required when conditioning is enabled")
        if embedding.dim() == 1:
            embedding = embedding[None].expand(batch, -1)
        if embedding.shape != (batch, self.cfg.embed_dim):
            raise ConfigError(
                f"embedding must be (batch={batch}, {self.cfg.embed_dim}), got {tuple(embedding.shape)}"
            )
        return self.tokens(embedding)

    def forward(self, lr: Tensor, embedding: Optional[Tensor] = None) -> Tensor:
        side = max(lr.shape[-2:]) * self.cfg.scale_factor
        if side > self.cfg.max_output_side:
            raise InputError(f"output side {side} exceeds max_output_side {self.cfg.max_output_side}")
        feat = self.rrdb_forward(self.extract_shallow(lr))
        tokens = self.project_tokens(embedding, lr.shape[0])
        for stage in self.stages:
            feat = stage(feat, tokens)
        return self.head(feat)


def _embedding_tensor(embedding, dtype) -> Optional[Tensor]:
    if embedding is None:
        return None
    if isinstance(embedding, LocationEmbedding):
        return embedding.as_tensor(dtype)
    if isinstance(embedding, (list, tuple)):
        return torch.stack([e.as_tensor(dtype) for e in embedding])
    return embedding.to(dtype)


def generate(model: Generator, lr: Tensor, embedding=None) -> Tensor:
    """Super-resolve ``lr``; the output is clamped to [0, 1] outside training."""
    squeeze = lr.dim() == 3
    if squeeze:
        lr = lr[None]
    emb = _embedding_tensor(embedding, lr.dtype) if model.cfg.cond_enabled else None
    if model.cfg.cond_enabled and emb is None:
        raise InputError("a location embedding is required when conditioning is enabled")
    if model.training:
        out = model(lr, emb)
    else:
        with torch.no_grad():
            out = model(lr, emb).clamp(0.0, 1.0)
    return out[0] if squeeze else out
