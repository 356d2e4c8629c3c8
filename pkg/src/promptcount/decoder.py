"""Convolutional density decoder with two-scale fusion and a sigmoid head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

_ACTIVATIONS = {"gelu": F.gelu, "identity": lambda x: x}


@dataclass
class DecoderConfig:
    # output widths of the successive 3x3 convs; a 1x1 head maps the last one to 1
    channel_schedule: list[int] = field(default_factory=lambda: [512, 256, 128, 64, 32])
    fusion_scale_index: int = 1
    activation: str = "gelu"  # "identity" exists for linearity probes only
    align_corners: bool = False
    # sigmoid(-10) ~ 5e-5 per pixel: start near the empty background of sparse density maps
    head_bias_init: float = -10.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = list(self.channel_schedule)
        if not s or any(c <= 0 for c in s):
            raise ConfigError("decoder.channel_schedule: needs positive entries")
        if any(s[i] != 2 * s[i + 1] for i in range(1, len(s) - 1)):
            raise ConfigError(f"decoder.channel_schedule: must halve after the first entry, got {s}")
        if self.fusion_scale_index != 1:
            raise ConfigError("decoder.fusion_scale_index: fused maps must enter before the second conv (index 1)")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"decoder.activation: unknown {self.activation!r}")


def _up(x, align_corners=False):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=align_corners)


def fuse_scales(coarse, fine, conv3x3: nn.Conv2d, conv1x1: nn.Conv2d, activation=F.gelu, align_corners=False):
    """Upsampled activated 3x3 conv of the coarse map plus activated 1x1 conv of the fine map.

    ``coarse`` is (B, p, p, n) and ``fine`` (B, 2p, 2p, n), channels-last; the
    result is (B, 2p, 2p, c) with c the conv output width.
    """
    if conv3x3.out_channels != conv1x1.out_channels:
        raise ConfigError("fuse_scales: the two branches must produce the same channel count")
    if coarse.shape[-1] != conv3x3.in_channels or fine.shape[-1] != conv1x1.in_channels:
        raise ConfigError("fuse_scales: input channels do not match the convolutions")
    c = activation(conv3x3(coarse.permute(0, 3, 1, 2)))
    f = activation(conv1x1(fine.permute(0, 3, 1, 2)))
    return (_up(c, align_corners) + f).permute(0, 2, 3, 1)


class DensityDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, embed_dim: int, grid_side: int, input_side: int, num_scales: int = 2):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.grid_side = grid_side
        self.input_side = input_side
        self.act = _ACTIVATIONS[cfg.activation]
        ratio = input_side / grid_side
        n_up = int(round(math.log2(ratio))) if ratio >= 2 else 0
        if 2 ** n_up != ratio or n_up < 1:
            raise ConfigError(f"decoder: input_side/grid_side = {ratio} is not a power of two >= 2")
        sched = list(cfg.channel_schedule)
        if n_up > len(sched):
            raise ConfigError(f"decoder.channel_schedule: {len(sched)} convs cannot host {n_up} upsampling stages")
        self.n_up = n_up
        widths = [embed_dim, *sched]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=1, padding=1) for i in range(len(sched))
        )
        # extra map j (1-based) enters right before conv index j
        self.fusion_points = list(range(cfg.fusion_scale_index, cfg.fusion_scale_index + num_scales - 1))
        for j, idx in enumerate(self.fusion_points, start=1):
            if idx >= len(sched) or idx > n_up:
                raise ConfigError(f"decoder: no fusion hook for interaction scale {j + 1} (needs conv index {idx})")
        self.fusion_projs = nn.ModuleList(
            nn.Conv2d(embed_dim, widths[idx], 1) for idx in self.fusion_points
        )
        self.head = nn.Conv2d(sched[-1], 1, 1)
        # He init keeps activation scale through the GeLU stack; the default init shrinks it per stage
        for conv in [*self.convs, *self.fusion_projs]:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        nn.init.constant_(self.head.bias, cfg.head_bias_init)

    def stage_sides(self) -> list[int]:
        return [self.grid_side * 2 ** k for k in range(self.n_up + 1)]

    def fuse(self, coarse, fine):
        return fuse_scales(coarse, fine, self.convs[0], self.fusion_projs[0], self.act, self.cfg.align_corners)

    def forward(self, maps, return_logits: bool = False):
        """Decode channels-last interaction maps (coarse first) into (B, H, W) densities in (0, 1)."""
        maps = list(maps)
        if len(maps) != len(self.fusion_points) + 1:
            raise InvalidInputError(f"decoder expects {len(self.fusion_points) + 1} maps, got {len(maps)}")
        if maps[0].shape[-1] != self.convs[0].in_channels:
            raise InvalidInputError("decoder: map width does not match embed_dim")
        x = maps[0].permute(0, 3, 1, 2)
        for i, conv in enumerate(self.convs):
            if i in self.fusion_points:
                j = self.fusion_points.index(i)
                x = x + self.act(self.fusion_projs[j](maps[j + 1].permute(0, 3, 1, 2)))
            x = self.act(conv(x))
            if i < self.n_up:
                x = _up(x, self.cfg.align_corners)
        logits = self.head(x)[:, 0]
        return logits if return_logits else torch.sigmoid(logits)
