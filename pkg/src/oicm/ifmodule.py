"""Information filter: encoder (8x down), factorized entropy model, decoder.

Sits between backbone head and tail. Trained with noise-relaxed latents
under an entropy penalty so it learns to drop information the contrastive
objective does not need; at later stages the relaxation is disabled and the
filter becomes a deterministic feature transform (no hard quantization
happens here, only in the stage-2 codec).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .entropy import FactorizedEntropyModel, quantize
from .errors import ShapeError


@dataclass
class RelaxedLatent:
    """Noise-relaxed latent plus the seed that reproduces it."""

    values: torch.Tensor
    noise_seed: int


class ConvBlock(nn.Module):
    """Plain two-conv residual block (no norm), LeakyReLU, as used by the codecs."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        out = self.act(self.conv1(x))
        out = self.conv2(out)
        return x + out


def resblock_stack(channels: int, blocks: int) -> nn.Sequential:
    return nn.Sequential(*[ConvBlock(channels) for _ in range(blocks)])


class FilterEncoder(nn.Module):
    """Three stride-2 convolutions interleaved with residual stacks: 8x down."""

    def __init__(self, in_channels: int, width: int = 128, latent_channels: int = 128,
                 blocks: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            resblock_stack(width, blocks),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            resblock_stack(width, blocks),
            nn.Conv2d(width, latent_channels, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class FilterDecoder(nn.Module):
    """Mirror of FilterEncoder with transposed convolutions: 8x up."""

    def __init__(self, out_channels: int, width: int = 128, latent_channels: int = 128,
                 blocks: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, width, 3, stride=2, padding=1,
                               output_padding=1),
            resblock_stack(width, blocks),
            nn.ConvTranspose2d(width, width, 3, stride=2, padding=1, output_padding=1),
            resblock_stack(width, blocks),
            nn.ConvTranspose2d(width, out_channels, 3, stride=2, padding=1,
                               output_padding=1),
        )

    def forward(self, x):
        return self.net(x)


class InformationFilter(nn.Module):
    def __init__(self, feature_channels: int = 64, latent_channels: int = 128,
                 width: int = 128, blocks: int = 3):
        super().__init__()
        self.feature_channels = feature_channels
        self.latent_channels = latent_channels
        self.encoder = FilterEncoder(feature_channels, width, latent_channels, blocks)
        self.decoder = FilterDecoder(feature_channels, width, latent_channels, blocks)
        self.entropy_model = FactorizedEntropyModel(latent_channels)

    def encode(self, feat: torch.Tensor) -> torch.Tensor:
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        if feat.shape[1] != self.feature_channels:
            raise ShapeError(
                f"expected {self.feature_channels} channels, got {feat.shape[1]}"
            )
        h, w = feat.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"feature dims must be divisible by 8, got {h}x{w}")
        latent = self.encoder(feat)
        return latent.squeeze(0) if squeeze else latent

    def relax(self, latent: torch.Tensor, seed: int) -> RelaxedLatent:
        gen = torch.Generator(device=latent.device)
        gen.manual_seed(seed)
        values = quantize(latent, "noise", generator=gen)
        return RelaxedLatent(values=values, noise_seed=seed)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        if latent.shape[1] != self.latent_channels:
            raise ShapeError(
                f"expected {self.latent_channels} latent channels, got {latent.shape[1]}"
            )
        feat = self.decoder(latent)
        return feat.squeeze(0) if squeeze else feat

    def entropy_bits(self, latent: torch.Tensor) -> torch.Tensor:
        """Sum of -log2 p over the latent under the factorized model."""
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        return self.entropy_model.entropy_bits(latent)

    def forward(self, feat: torch.Tensor, noise_seed: int | None = None):
        """feat -> (filtered feature, latent used, entropy bits).

        With noise_seed the latent is noise-relaxed (stage-1 training path);
        without it the pass is deterministic (stages 2-3).
        """
        latent = self.encode(feat)
        if noise_seed is not None:
            latent = self.relax(latent, noise_seed).values
        bits = self.entropy_bits(latent)
        return self.decode(latent), latent, bits
