"""Unconditional patch discriminator over mel spectrograms.

A stack of strided 2-d convolutions treats the mel as a one-channel
image. The last layer emits raw patch scores (least-squares GAN, so no
output nonlinearity); every layer's output doubles as a feature map for
the feature-matching loss.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainingConfig


class MelDiscriminator(nn.Module):
    """Strided conv stack; returns (score_map, per-layer features)."""

    def __init__(self, config: TrainingConfig):
        super().__init__()
        channels = [1]
        for i in range(config.disc_layers - 1):
            channels.append(config.disc_channels * (2**i))
        self.convs = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], kernel_size=4, stride=2, padding=1)
            for i in range(config.disc_layers - 1)
        )
        self.score = nn.Conv2d(channels[-1], 1, kernel_size=4, stride=2, padding=1)

    def forward(self, mel: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """mel: (M, n_mels) single utterance or (B, M, n_mels) equal lengths."""
        n_layers = len(self.convs) + 1
        if mel.shape[-2] < 2**n_layers or mel.shape[-1] < 2**n_layers:
            raise ValueError(
                f"mel {tuple(mel.shape[-2:])} too small for {n_layers} stride-2 layers"
            )
        x = mel.unsqueeze(0) if mel.dim() == 2 else mel
        x = x.unsqueeze(1)  # (B, 1, M, n_mels)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            features.append(x)
        score = self.score(x)
        features.append(score)
        if mel.dim() == 2:
            score = score.squeeze(0)
            features = [f.squeeze(0) for f in features]
        return score, features
