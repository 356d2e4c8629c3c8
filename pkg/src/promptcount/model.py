"""Full counting network: backbone -> patch projection -> interaction -> decoder."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .alignment import project_patches
from .backbone import Backbone, BackboneConfig, TextEmbedding
from .decoder import DecoderConfig, DensityDecoder
from .interaction import HierarchicalInteraction, InteractionConfig

TRAINABLE_GROUPS = ("visual_prompts", "text_context", "patch_proj", "interaction", "decoder")


class PromptCounter(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, interaction_cfg: InteractionConfig | None = None,
                 decoder_cfg: DecoderConfig | None = None, load_weights: bool = True):
        super().__init__()
        interaction_cfg = interaction_cfg or InteractionConfig()
        decoder_cfg = decoder_cfg or DecoderConfig()
        self.backbone = Backbone(backbone_cfg, load_weights=load_weights)
        d, n, p = backbone_cfg.visual_width, backbone_cfg.embed_dim, backbone_cfg.patch_grid_side
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(backbone_cfg.seed + 1)
            self.patch_proj = nn.Linear(d, n)
            self.interaction = HierarchicalInteraction(interaction_cfg, p, n)
            self.decoder = DensityDecoder(decoder_cfg, n, p, backbone_cfg.input_side, interaction_cfg.num_scales)
        # start the patch projection at the frozen global projection
        with torch.no_grad():
            self.patch_proj.weight.copy_(self.backbone.visual.proj.t())
            self.patch_proj.bias.zero_()

    @property
    def input_side(self) -> int:
        return self.backbone.cfg.input_side

    def embed(self, images: torch.Tensor, class_names: str | Sequence[str]):
        """Patch embeddings (B, p, p, n) and the text embedding for a batch."""
        if images.dim() == 3:
            images = images[None]
        if isinstance(class_names, str):
            class_names = [class_names] * images.shape[0]
        out = self.backbone.encode_image(images)
        text = self.backbone.encode_text(list(class_names))
        return project_patches(out.patch_grid, self.patch_proj), text, out

    def forward_features(self, images, class_names) -> dict:
        patches, text, out = self.embed(images, class_names)
        maps = self.interaction(patches, text)
        density = self.decoder(maps)
        return {"global_feature": out.global_feature, "patch_grid": out.patch_grid,
                "patch_embeddings": patches, "text": text, "maps": maps, "density": density}

    def forward(self, images, class_names) -> torch.Tensor:
        """Density maps (B, H, W) with values in (0, 1)."""
        patches, text, _ = self.embed(images, class_names)
        return self.decoder(self.interaction(patches, text))


def parameter_groups(model: PromptCounter) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups = {
        "visual_prompts": [("backbone.visual_prompts", model.backbone.visual_prompts)],
        "text_context": [("backbone.text_context", model.backbone.text_context)],
        "patch_proj": [(f"patch_proj.{k}", v) for k, v in model.patch_proj.named_parameters()],
        "interaction": [(f"interaction.{k}", v) for k, v in model.interaction.named_parameters()],
        "decoder": [(f"decoder.{k}", v) for k, v in model.decoder.named_parameters()],
    }
    return groups


def trainable_parameters(model: PromptCounter) -> list[tuple[str, nn.Parameter]]:
    """Named parameters that training may update; the encoders are never included."""
    return [item for group in TRAINABLE_GROUPS for item in parameter_groups(model)[group]]


def count_trainable(model: PromptCounter) -> int:
    return sum(p.numel() for _, p in trainable_parameters(model))


def build_on_meta(backbone_cfg, interaction_cfg=None, decoder_cfg=None) -> PromptCounter:
    """Shape-only model (no storage); enough for parameter accounting at ViT-B/16 scale."""
    with torch.device("meta"):
        return PromptCounter(backbone_cfg, interaction_cfg, decoder_cfg, load_weights=False)
