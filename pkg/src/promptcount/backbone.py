"""Frozen CLIP-style dual encoder with deep visual prompts and learnable text context.

Both encoders follow the OpenAI CLIP ViT layout (parameter names included) so a
published ViT-B/16 archive loads directly. ``mode="stub"`` builds the same
architecture at toy width from a fixed seed; every downstream module treats the
two modes identically.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
VIT_PATCH = 16
TEMPLATE = "a photo of a"


@dataclass
class BackboneConfig:
    patch_grid_side: int = 14
    visual_width: int = 768
    embed_dim: int = 512
    num_layers: int = 12
    num_visual_prompts_per_layer: int = 20
    num_context_tokens: int = 2
    input_side: int = 224
    mode: str = "pretrained"
    visual_heads: int = 12
    text_width: int = 512
    text_layers: int = 12
    text_heads: int = 8
    context_length: int = 77
    vocab_size: int = 49408
    weights_path: str | None = None
    context_init: str = "random"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("pretrained", "stub"):
            raise ConfigError(f"backbone.mode: expected 'pretrained' or 'stub', got {self.mode!r}")
        if self.context_init not in ("random", "template"):
            raise ConfigError(f"backbone.context_init: unknown value {self.context_init!r}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "int" and f.name != "seed" and value <= 0:
                raise ConfigError(f"backbone.{f.name}: must be > 0, got {value}")
        if self.input_side % self.patch_grid_side:
            raise ConfigError("backbone.input_side: must be a multiple of patch_grid_side")
        if self.mode == "pretrained" and self.input_side != VIT_PATCH * self.patch_grid_side:
            raise ConfigError(
                f"backbone.input_side: pretrained ViT-B/16 needs {VIT_PATCH} * patch_grid_side "
                f"= {VIT_PATCH * self.patch_grid_side}, got {self.input_side}"
            )
        if self.visual_width % self.visual_heads or self.text_width % self.text_heads:
            raise ConfigError("backbone: widths must be divisible by their head counts")
        if self.num_context_tokens > self.context_length - 3:
            raise ConfigError("backbone.num_context_tokens: leaves no room for class tokens")

    @property
    def patch_size(self) -> int:
        return self.input_side // self.patch_grid_side

    @classmethod
    def stub(cls, **overrides) -> "BackboneConfig":
        """Desk-scale configuration: random frozen encoders, tiny widths."""
        base = cls(
            patch_grid_side=8, visual_width=32, embed_dim=16, num_layers=2,
            num_visual_prompts_per_layer=4, num_context_tokens=2, input_side=64,
            mode="stub", visual_heads=4, text_width=32, text_layers=2, text_heads=4,
            context_length=16, vocab_size=512,
        )
        return replace(base, **overrides)


class BackboneOutput(NamedTuple):
    global_feature: torch.Tensor  # (..., d)
    patch_grid: torch.Tensor  # (..., p, p, d)


class TextEmbedding(NamedTuple):
    embedding: torch.Tensor  # (..., n)
    token_features: torch.Tensor | None = None  # (..., L, n)
    token_mask: torch.Tensor | None = None  # (..., L), True on real tokens


# ---------------------------------------------------------------------------
# tokenizers


class HashTokenizer:
    """Whitespace tokenizer mapping words to ids through CRC32.

    Stands in for BPE in stub mode; ids are stable across processes.
    """

    def __init__(self, vocab_size: int):
        if vocab_size < 8:
            raise ConfigError("backbone.vocab_size: stub tokenizer needs at least 8 ids")
        self.vocab_size = vocab_size
        self.sot = vocab_size - 2
        self.eot = vocab_size - 1

    def encode(self, text: str) -> list[int]:
        return [1 + zlib.crc32(w.encode("utf-8")) % (self.vocab_size - 3) for w in text.lower().split()]


class ClipBPETokenizer:
    """Byte-pair tokenizer of the published CLIP text encoder (vocabulary from open_clip)."""

    def __init__(self):
        try:
            from open_clip.tokenizer import SimpleTokenizer
        except ImportError as exc:  # pragma: no cover - depends on the optional extra
            raise ConfigError(
                "backbone.mode: pretrained mode needs the 'open_clip_torch' package for the CLIP vocabulary"
            ) from exc
        self._tok = SimpleTokenizer()
        self.sot = self._tok.encoder["<start_of_text>"]
        self.eot = self._tok.encoder["<end_of_text>"]

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text)


# ---------------------------------------------------------------------------
# transformer pieces (OpenAI parameter naming)


class LayerNorm(nn.LayerNorm):
    pass


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class PackedAttention(nn.Module):
    """Multi-head self-attention with a packed qkv projection."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)
        nn.init.xavier_uniform_(self.in_proj_weight)

    def forward(self, x, attn_mask=None):
        b, length, width = x.shape
        q, k, v = F.linear(x, self.in_proj_weight, self.in_proj_bias).chunk(3, dim=-1)
        hd = width // self.heads

        def split(t):
            return t.reshape(b, length, self.heads, hd).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if attn_mask is not None:
            scores = scores + attn_mask
        out = scores.softmax(dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(b, length, width))


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.attn = PackedAttention(width, heads)
        self.ln_1 = LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, width * 4)),
            ("gelu", QuickGELU()),
            ("c_proj", nn.Linear(width * 4, width)),
        ]))
        self.ln_2 = LayerNorm(width)

    def forward(self, x, attn_mask=None):
        x = x + self.attn(self.ln_1(x), attn_mask)
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int):
        super().__init__()
        self.resblocks = nn.ModuleList(ResidualAttentionBlock(width, heads) for _ in range(layers))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        width, p = cfg.visual_width, cfg.patch_grid_side
        scale = width ** -0.5
        self.grid = p
        self.conv1 = nn.Conv2d(3, width, cfg.patch_size, stride=cfg.patch_size, bias=False)
        self.class_embedding = nn.Parameter(scale * torch.randn(width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(p * p + 1, width))
        self.ln_pre = LayerNorm(width)
        self.transformer = Transformer(width, cfg.num_layers, cfg.visual_heads)
        self.ln_post = LayerNorm(width)
        self.proj = nn.Parameter(scale * torch.randn(width, cfg.embed_dim))

    def forward(self, x, prompts=None):
        """``x`` is (B, 3, H, W); ``prompts`` is (layers, P, d) or None."""
        b = x.shape[0]
        x = self.conv1(x).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
        x = self.ln_pre(x)
        for i, block in enumerate(self.transformer.resblocks):
            if prompts is None:
                x = block(x)
                continue
            n_prompt = prompts.shape[1]
            x = torch.cat([x[:, :1], prompts[i].expand(b, -1, -1), x[:, 1:]], dim=1)
            x = block(x)
            # deep prompting: this layer's prompt outputs are replaced at the next layer
            x = torch.cat([x[:, :1], x[:, 1 + n_prompt:]], dim=1)
        x = self.ln_post(x)
        return x[:, 0], x[:, 1:].reshape(b, self.grid, self.grid, -1)


class TextEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        width = cfg.text_width
        self.context_length = cfg.context_length
        self.token_embedding = nn.Embedding(cfg.vocab_size, width)
        self.positional_embedding = nn.Parameter(0.01 * torch.randn(cfg.context_length, width))
        self.transformer = Transformer(width, cfg.text_layers, cfg.text_heads)
        self.ln_final = LayerNorm(width)
        self.text_projection = nn.Parameter(width ** -0.5 * torch.randn(width, cfg.embed_dim))
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        causal = torch.full((cfg.context_length, cfg.context_length), float("-inf")).triu_(1)
        self.register_buffer("causal_mask", causal, persistent=False)

    def forward(self, tokens, context, eot_index):
        """``tokens`` is (B, L - k) with the k context slots not yet inserted."""
        x = self.token_embedding(tokens)
        if context is not None and context.shape[0]:
            ctx = context.to(x.dtype).expand(x.shape[0], -1, -1)
            x = torch.cat([x[:, :1], ctx, x[:, 1:]], dim=1)
        x = x + self.positional_embedding.to(x.dtype)
        mask = self.causal_mask.to(x.dtype)
        for block in self.transformer.resblocks:
            x = block(x, mask)
        feats = self.ln_final(x) @ self.text_projection.to(x.dtype)
        pooled = feats[torch.arange(x.shape[0]), eot_index]
        return pooled, feats


# ---------------------------------------------------------------------------


class Backbone(nn.Module):
    """Frozen encoders plus the two trainable prompt groups.

    Trainable: ``visual_prompts`` (layers, P, d) and ``text_context`` (k, text_width).
    Everything under ``visual`` and ``text`` is frozen, including the global
    projection ``visual.proj``.
    """

    def __init__(self, cfg: BackboneConfig, load_weights: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.visual = VisionEncoder(cfg)
            self.text = TextEncoder(cfg)
            bound = 1.0 / math.sqrt(cfg.visual_width)
            self.visual_prompts = nn.Parameter(
                torch.empty(cfg.num_layers, cfg.num_visual_prompts_per_layer, cfg.visual_width).uniform_(-bound, bound)
            )
            self.text_context = nn.Parameter(0.02 * torch.randn(cfg.num_context_tokens, cfg.text_width))
        self.visual.requires_grad_(False)
        self.text.requires_grad_(False)

        if cfg.mode == "pretrained":
            self.tokenizer = ClipBPETokenizer()
            mean, std = CLIP_MEAN, CLIP_STD
            if load_weights:
                load_pretrained_weights(self, cfg.weights_path)
        else:
            self.tokenizer = HashTokenizer(cfg.vocab_size)
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.register_buffer("pixel_mean", torch.tensor(mean), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(std), persistent=False)
        if cfg.context_init == "template" and cfg.num_context_tokens:
            self._init_context_from_template()

    def _init_context_from_template(self) -> None:
        ids = self.tokenizer.encode(TEMPLATE)
        k = self.cfg.num_context_tokens
        ids = (ids * k)[:k]
        with torch.no_grad():
            self.text_context.copy_(self.text.token_embedding.weight[torch.tensor(ids)])

    # -- image ---------------------------------------------------------------

    def encode_image(self, images: torch.Tensor, prompts: torch.Tensor | None = None) -> BackboneOutput:
        """Encode channels-last RGB images in [0, 1].

        ``images`` is (H, W, 3) or (B, H, W, 3). ``prompts`` defaults to the
        module's own visual prompts; pass a tensor to override them.
        """
        side = self.cfg.input_side
        unbatched = images.dim() == 3
        if unbatched:
            images = images.unsqueeze(0)
        if images.dim() != 4 or tuple(images.shape[1:]) != (side, side, 3):
            raise InvalidInputError(f"encode_image expects (B, {side}, {side}, 3), got {tuple(images.shape)}")
        dtype = self.visual.conv1.weight.dtype
        x = images.to(dtype)
        x = (x - self.pixel_mean.to(dtype)) / self.pixel_std.to(dtype)
        x = x.permute(0, 3, 1, 2)
        if prompts is None:
            prompts = self.visual_prompts
        z0, zx = self.visual(x, prompts)
        if not (torch.isfinite(z0).all() and torch.isfinite(zx).all()):
            raise NumericalError("encode_image produced non-finite activations")
        if unbatched:
            return BackboneOutput(z0[0], zx[0])
        return BackboneOutput(z0, zx)

    def image_embedding(self, global_feature: torch.Tensor) -> torch.Tensor:
        """Apply the frozen global projection to ``z0``."""
        return global_feature @ self.visual.proj

    # -- text ----------------------------------------------------------------

    def tokenize(self, class_names: Sequence[str]):
        k = self.cfg.num_context_tokens
        length = self.cfg.context_length - k
        room = length - 2
        tokens = torch.zeros(len(class_names), length, dtype=torch.long)
        eot = torch.empty(len(class_names), dtype=torch.long)
        for row, name in enumerate(class_names):
            if not isinstance(name, str) or not name.strip():
                raise InvalidInputError("encode_text: empty prompt")
            ids = self.tokenizer.encode(name)
            if len(ids) > room:
                warnings.warn(f"prompt {name!r} truncated to {room} tokens", stacklevel=3)
                ids = ids[:room]
            seq = [self.tokenizer.sot, *ids, self.tokenizer.eot]
            tokens[row, : len(seq)] = torch.tensor(seq)
            eot[row] = len(seq) - 1 + k
        return tokens, eot

    def encode_text(self, class_names: str | Sequence[str], context: torch.Tensor | None = None) -> TextEmbedding:
        single = isinstance(class_names, str)
        names = [class_names] if single else list(class_names)
        if not names:
            raise InvalidInputError("encode_text: no prompts given")
        tokens, eot = self.tokenize(names)
        device = self.text.token_embedding.weight.device
        tokens, eot = tokens.to(device), eot.to(device)
        if context is None:
            context = self.text_context
        pooled, feats = self.text(tokens, context, eot)
        positions = torch.arange(feats.shape[1], device=device)
        token_mask = positions[None, :] <= eot[:, None]
        if not torch.isfinite(pooled).all():
            raise NumericalError("encode_text produced non-finite activations")
        if single:
            return TextEmbedding(pooled[0], feats[0], token_mask[0])
        return TextEmbedding(pooled, feats, token_mask)

    # -- bookkeeping -----------------------------------------------------------

    def frozen_modules(self) -> dict[str, nn.Module]:
        return {"visual": self.visual, "text": self.text}

    def frozen_digest(self) -> str:
        """SHA-256 over every frozen encoder tensor, in name order."""
        h = hashlib.sha256()
        for prefix, module in self.frozen_modules().items():
            for name, tensor in sorted(module.state_dict().items()):
                h.update(f"{prefix}.{name}:{tuple(tensor.shape)}:{tensor.dtype}".encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def clip_similarity(image_embedding, text_embedding) -> float:
    """Cosine similarity between two embedding vectors."""
    a = np.asarray(image_embedding.detach().cpu() if torch.is_tensor(image_embedding) else image_embedding, dtype=np.float64)
    b = np.asarray(text_embedding.detach().cpu() if torch.is_tensor(text_embedding) else text_embedding, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"clip_similarity needs two vectors of equal length, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("clip_similarity: zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


_IGNORED_KEYS = {"logit_scale", "input_resolution", "context_length", "vocab_size"}
_TEXT_PREFIXES = ("token_embedding.", "positional_embedding", "transformer.", "ln_final.", "text_projection")


def _read_archive(path: str) -> dict[str, torch.Tensor]:
    try:
        return torch.jit.load(path, map_location="cpu").state_dict()
    except (RuntimeError, ValueError):
        pass
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, dict) and "state_dict" in obj:
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise ConfigError(f"backbone.weights_path: {path} does not hold a state dict")
    return obj


def load_pretrained_weights(backbone: Backbone, path: str | None) -> None:
    """Load a published CLIP ViT-B/16 archive (TorchScript or plain state dict)."""
    if not path or not os.path.isfile(path):
        raise ConfigError(f"backbone.weights_path: pretrained weights not found at {path!r}")
    state = {k.removeprefix("module."): v for k, v in _read_archive(path).items()}
    visual, text = {}, {}
    for key, value in state.items():
        if key in _IGNORED_KEYS:
            continue
        if key.startswith("visual."):
            visual[key[len("visual."):]] = value.float()
        elif key.startswith(_TEXT_PREFIXES):
            text[key] = value.float()
    for module, sub in ((backbone.visual, visual), (backbone.text, text)):
        expected = module.state_dict()
        bad = [k for k in expected if k not in sub or sub[k].shape != expected[k].shape]
        if bad:
            raise ConfigError(f"backbone.weights_path: archive does not match the configured encoder ({bad[:3]} ...)")
        module.load_state_dict({k: sub[k] for k in expected}, strict=True)
    logger.info("loaded pretrained encoder weights from %s", path)
