"""Split residual backbone: head (stride 4), tail (three halving stages), projector.

The head output is the working feature resolution for the whole pipeline:
everything downstream (information filter, codec, task heads) consumes
feature maps at 1/4 of the image dims. Widths default to roughly a quarter
of the usual 50-layer residual network so stage-1 training stays desk-sized;
they are constructor arguments, not constants.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


class ResidualBlock(nn.Module):
    """Basic two-conv residual block with BN; optional stride-2 downsampling."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1,
                               bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _make_stage(in_channels: int, out_channels: int, blocks: int, stride: int):
    layers = [ResidualBlock(in_channels, out_channels, stride=stride)]
    layers += [ResidualBlock(out_channels, out_channels) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class BackboneHead(nn.Module):
    """Stem (stride 2) + max-pool (stride 2) + first residual stage: 4x downsampling."""

    downsample_factor = 4

    def __init__(self, out_channels: int = 64, stem_channels: int = 32, blocks: int = 1):
        super().__init__()
        self.out_channels = out_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem_channels),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = _make_stage(stem_channels, out_channels, blocks, stride=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image dims must be divisible by 32, got {h}x{w}")
        out = self.stage1(self.pool(self.stem(images)))
        return out.squeeze(0) if squeeze else out


class BackboneTail(nn.Module):
    """Remaining residual stages; exposes every stage output plus a pooled vector."""

    def __init__(self, in_channels: int = 64, stage_channels=(128, 256, 512),
                 blocks: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.stage_channels = tuple(stage_channels)
        stages = []
        prev = in_channels
        for ch in self.stage_channels:
            stages.append(_make_stage(prev, ch, blocks, stride=2))
            prev = ch
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def forward(self, feat: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        if feat.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} channels, got {feat.shape[1]}"
            )
        stage_feats = []
        out = feat
        for stage in self.stages:
            out = stage(out)
            stage_feats.append(out)
        pooled = out.mean(dim=(-2, -1))
        if squeeze:
            stage_feats = [s.squeeze(0) for s in stage_feats]
            pooled = pooled.squeeze(0)
        return stage_feats, pooled


class ProjectionHead(nn.Module):
    """One-hidden-layer MLP onto the unit sphere."""

    def __init__(self, in_dim: int = 512, hidden_dim: int = 512, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.out_dim = out_dim

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.shape[-1] != self.fc1.in_features:
            raise ShapeError(
                f"expected pooled dim {self.fc1.in_features}, got {pooled.shape[-1]}"
            )
        out = self.fc2(F.relu(self.fc1(pooled)))
        return F.normalize(out, dim=-1)
