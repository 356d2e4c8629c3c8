"""Hierarchical patch-text interaction.

Each scale runs self-attention over the visual tokens, cross-attention into the
text, and an MLP. Between scales a 3x3 conv with identity skip is followed by
2x bilinear upsampling, so scale k works at side ``p * 2**(k-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TextEmbedding
from .errors import ConfigError, InvalidInputError

KV_MODES = ("pooled_single_token", "token_sequence")


@dataclass
class InteractionConfig:
    num_scales: int = 2
    embed_dim: int | None = None  # None: inherit the backbone's embed_dim
    num_heads: int = 8
    ffn_expansion: int = 4
    cross_attention_kv_mode: str = "pooled_single_token"
    depth: int = 1  # blocks per scale
    align_corners: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_scales not in (1, 2, 3):
            raise ConfigError(f"interaction.num_scales: must be 1, 2 or 3, got {self.num_scales}")
        if self.cross_attention_kv_mode not in KV_MODES:
            raise ConfigError(f"interaction.cross_attention_kv_mode: unknown mode {self.cross_attention_kv_mode!r}")
        if self.num_heads <= 0 or self.ffn_expansion <= 0 or self.depth <= 0:
            raise ConfigError("interaction: num_heads, ffn_expansion and depth must be positive")
        if self.embed_dim is not None and self.embed_dim % self.num_heads:
            raise ConfigError("interaction.embed_dim: must be divisible by num_heads")

    @classmethod
    def single_scale_ablation(cls, **overrides) -> "InteractionConfig":
        """Plain one-scale stack: 4 blocks, 4 heads, narrower MLP to keep the parameter budget."""
        return replace(cls(num_scales=1, depth=4, num_heads=4, ffn_expansion=2), **overrides)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"interaction: embed_dim {dim} not divisible by num_heads {heads}")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key_value, key_mask=None):
        b, s, dim = query.shape
        length = key_value.shape[1]
        hd = dim // self.heads
        q = self.q_proj(query).reshape(b, s, self.heads, hd).transpose(1, 2)
        k = self.k_proj(key_value).reshape(b, length, self.heads, hd).transpose(1, 2)
        v = self.v_proj(key_value).reshape(b, length, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(b, s, dim))


class InteractionBlock(nn.Module):
    """Pre-norm MHSA -> MHCA(text) -> FFN, each with a residual connection."""

    def __init__(self, dim: int, heads: int, ffn_expansion: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim * ffn_expansion),
            nn.GELU(),
            nn.Linear(dim * ffn_expansion, dim),
        )

    def forward(self, tokens, text_kv, text_mask=None):
        if text_kv.shape[-1] != tokens.shape[-1]:
            raise InvalidInputError(f"interaction_block: token width {tokens.shape[-1]} != text width {text_kv.shape[-1]}")
        h = self.norm1(tokens)
        x = tokens + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), text_kv, text_mask)
        return x + self.ffn(self.norm3(x))


def upsample_features(feature_map: torch.Tensor, align_corners: bool = False) -> torch.Tensor:
    """2x bilinear upsampling of a channels-last (..., h, w, n) map."""
    lead, (h, w, n) = feature_map.shape[:-3], feature_map.shape[-3:]
    x = feature_map.reshape(-1, h, w, n).permute(0, 3, 1, 2)
    x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=align_corners)
    return x.permute(0, 2, 3, 1).reshape(*lead, 2 * h, 2 * w, n)


def text_keys(text, mode: str):
    """Cross-attention keys/values for a batch: ((B, L, n), mask or None)."""
    if isinstance(text, TextEmbedding):
        if mode == "token_sequence":
            if text.token_features is None:
                raise InvalidInputError("token_sequence mode needs token features from encode_text")
            return text.token_features, text.token_mask
        text = text.embedding
    return text.unsqueeze(-2), None


class HierarchicalInteraction(nn.Module):
    def __init__(self, cfg: InteractionConfig, grid_side: int, embed_dim: int):
        super().__init__()
        if cfg.embed_dim is not None and cfg.embed_dim != embed_dim:
            raise ConfigError(f"interaction.embed_dim: {cfg.embed_dim} != backbone embed_dim {embed_dim}")
        if embed_dim % cfg.num_heads:
            raise ConfigError(f"interaction.num_heads: {cfg.num_heads} does not divide embed_dim {embed_dim}")
        self.cfg = cfg
        self.grid_side = grid_side
        self.embed_dim = embed_dim
        sides = [grid_side * 2 ** k for k in range(cfg.num_scales)]
        self.pos_embeds = nn.ParameterList(
            nn.Parameter(0.02 * torch.randn(side * side, embed_dim)) for side in sides
        )
        self.stages = nn.ModuleList(
            nn.ModuleList(InteractionBlock(embed_dim, cfg.num_heads, cfg.ffn_expansion) for _ in range(cfg.depth))
            for _ in sides
        )
        self.bridges = nn.ModuleList(
            nn.Conv2d(embed_dim, embed_dim, 3, stride=1, padding=1) for _ in sides[1:]
        )

    def forward(self, patch_embeddings: torch.Tensor, text) -> list[torch.Tensor]:
        """Return one channels-last map per scale, coarse first."""
        unbatched = patch_embeddings.dim() == 3
        if unbatched:
            patch_embeddings = patch_embeddings[None]
            text = TextEmbedding(*(t[None] if t is not None else None for t in text)) \
                if isinstance(text, TextEmbedding) else text[None]
        b, h, w, n = patch_embeddings.shape
        if (h, w, n) != (self.grid_side, self.grid_side, self.embed_dim):
            raise InvalidInputError(f"interaction_forward: expected (B, {self.grid_side}, {self.grid_side}, "
                                    f"{self.embed_dim}), got {tuple(patch_embeddings.shape)}")
        kv, kv_mask = text_keys(text, self.cfg.cross_attention_kv_mode)
        maps = []
        x = patch_embeddings
        for k, (pos, blocks) in enumerate(zip(self.pos_embeds, self.stages)):
            if k:
                bridge = self.bridges[k - 1]
                c = x.permute(0, 3, 1, 2)
                x = (bridge(c) + c).permute(0, 2, 3, 1)
                x = upsample_features(x, self.cfg.align_corners)
            side = x.shape[1]
            tokens = x.reshape(b, side * side, n) + pos
            for block in blocks:
                tokens = block(tokens, kv, kv_mask)
            x = tokens.reshape(b, side, side, n)
            maps.append(x)
        return [m[0] for m in maps] if unbatched else maps
