"""Patch-to-text projection, objectness masks and the patch-text InfoNCE loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    pool_kernel: int = 16
    pool_stride: int = 16
    positivity_threshold: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("contrastive.temperature: must be > 0")
        if self.pool_kernel <= 0 or self.pool_kernel != self.pool_stride:
            raise ConfigError("contrastive.pool_kernel: must be positive and equal to pool_stride")
        if self.positivity_threshold < 0:
            raise ConfigError("contrastive.positivity_threshold: must be >= 0")


def project_patches(patch_grid: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """Map every cell of a (..., p, p, d) grid through ``projection`` independently."""
    if patch_grid.shape[-1] != projection.in_features:
        raise InvalidInputError(
            f"project_patches: grid width {patch_grid.shape[-1]} != projection input {projection.in_features}"
        )
    return projection(patch_grid)


def derive_objectness_mask(density, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    """Block-max pool a density map (..., H, W) and threshold it.

    Returns a boolean (..., H/stride, W/stride) tensor; True marks positive patches.
    """
    cfg = cfg or ContrastiveConfig()
    y = torch.as_tensor(np.asarray(density) if not torch.is_tensor(density) else density)
    h, w = y.shape[-2:]
    s = cfg.pool_stride
    if h % s or w % s:
        raise InvalidInputError(f"derive_objectness_mask: {h}x{w} not divisible by stride {s}")
    lead = y.shape[:-2]
    pooled = F.max_pool2d(y.reshape(-1, 1, h, w).double(), kernel_size=cfg.pool_kernel, stride=s)
    return (pooled > cfg.positivity_threshold).reshape(*lead, h // s, w // s)


def _cosine(patches: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    pn = patches.norm(dim=-1)
    tn = text.norm()
    if (pn == 0).any() or tn == 0:
        raise InvalidInputError("contrastive loss: zero-norm embedding")
    return (patches @ text) / (pn * tn)


def contrastive_loss_per_sample(patch_embeddings, text_embedding, mask, temperature: float = 0.07):
    """InfoNCE loss for each sample in a batch.

    ``patch_embeddings`` (B, p, p, n), ``text_embedding`` (B, n), ``mask`` (B, p, p).
    Returns ``(losses, valid)``: samples without positives get loss 0 and valid False.
    """
    losses, valid = [], []
    for ep, et, m in zip(patch_embeddings, text_embedding, mask):
        logits = _cosine(ep.reshape(-1, ep.shape[-1]), et) / temperature
        m = m.reshape(-1).to(torch.bool)
        if not m.any():
            losses.append(logits.sum() * 0)
            valid.append(False)
            continue
        if m.all():
            losses.append(logits.sum() * 0)
            valid.append(True)
            continue
        # -log(pos / (pos + neg)) = log(1 + neg / pos)
        gap = torch.logsumexp(logits[~m], 0) - torch.logsumexp(logits[m], 0)
        losses.append(torch.logaddexp(torch.zeros_like(gap), gap))
        valid.append(True)
    return torch.stack(losses), torch.tensor(valid, device=patch_embeddings.device)


def patch_text_contrastive_loss(patch_embeddings, text_embedding, mask, cfg: ContrastiveConfig | None = None):
    """Mean patch-text InfoNCE loss over samples that contain at least one positive patch.

    Accepts a single sample ((p, p, n), (n,), (p, p)) or a batch. Returns 0 when
    no sample has positives.
    """
    cfg = cfg or ContrastiveConfig()
    if patch_embeddings.dim() == 3:
        patch_embeddings, text_embedding, mask = patch_embeddings[None], text_embedding[None], mask[None]
    if patch_embeddings.shape[-1] != text_embedding.shape[-1]:
        raise InvalidInputError("contrastive loss: patch and text widths differ")
    losses, valid = contrastive_loss_per_sample(patch_embeddings, text_embedding, mask, cfg.temperature)
    if not valid.any():
        return losses.sum()
    return losses[valid].mean()


class ContrastiveLoss(nn.Module):
    """Batch loss wrapper that counts samples skipped for having no positive patch."""

    def __init__(self, cfg: ContrastiveConfig | None = None):
        super().__init__()
        self.cfg = cfg or ContrastiveConfig()
        self.empty_count = 0

    def forward(self, patch_embeddings, text_embedding, density):
        mask = derive_objectness_mask(density, self.cfg).to(patch_embeddings.device)
        if mask.shape != patch_embeddings.shape[:-1]:
            raise InvalidInputError(
                f"contrastive loss: mask grid {tuple(mask.shape[1:])} does not match the patch grid "
                f"{tuple(patch_embeddings.shape[1:-1])}; check contrastive.pool_kernel/pool_stride"
            )
        losses, valid = contrastive_loss_per_sample(patch_embeddings, text_embedding, mask, self.cfg.temperature)
        self.empty_count += int((~valid).sum())
        if not valid.any():
            return losses.sum()
        return losses[valid].mean()
