"""Deterministic acoustic backbone: text encoder, prosody predictors,
pitch embedding, and mel decoder.

The model-level wiring (latent concatenation, length regulation order,
teacher forcing) lives in model.py; these pieces are plain functions of
their inputs and parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import TrainingConfig
from .errors import VocabularyError
from .modules import TransformerStack


class TextEncoder(nn.Module):
    """Phoneme ids -> hidden representation H, shape (B, N, d_model)."""

    def __init__(self, n_symbols: int, config: TrainingConfig):
        super().__init__()
        self.n_symbols = n_symbols
        self.embedding = nn.Embedding(n_symbols, config.d_model, padding_idx=0)
        self.stack = TransformerStack(
            config.encoder_layers,
            config.d_model,
            config.n_heads,
            config.conv_filter_size,
            config.conv_kernel,
            config.dropout,
        )

    def forward(self, phonemes: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if phonemes.max() >= self.n_symbols or phonemes.min() < 0:
            raise VocabularyError(
                f"phoneme id out of range [0, {self.n_symbols}): "
                f"[{int(phonemes.min())}, {int(phonemes.max())}]"
            )
        return self.stack(self.embedding(phonemes), mask)


class ProsodyPredictor(nn.Module):
    """LSTM regressor from (B, N, in_dim) to one value per phoneme.

    Used twice with separate weights: log-duration and normalized pitch.
    """

    def __init__(self, in_dim: int, config: TrainingConfig):
        super().__init__()
        self.lstm = nn.LSTM(
            in_dim,
            config.predictor_hidden,
            num_layers=config.predictor_layers,
            batch_first=True,
            dropout=config.dropout if config.predictor_layers > 1 else 0.0,
        )
        self.projection = nn.Linear(config.predictor_hidden, 1)

    def forward(self, h_z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        out, _ = self.lstm(h_z)
        out = self.projection(out).squeeze(-1)
        if mask is not None:
            out = out * mask
        return out


class PitchEmbedding(nn.Module):
    """Scalar pitch track -> (B, N, d_model) via a same-padded kernel-3 conv."""

    def __init__(self, config: TrainingConfig):
        super().__init__()
        self.conv = nn.Conv1d(
            1, config.d_model, config.pitch_embed_kernel, stride=1,
            padding=config.pitch_embed_kernel // 2,
        )

    def forward(self, pitch: torch.Tensor) -> torch.Tensor:
        return self.conv(pitch.unsqueeze(1)).transpose(1, 2)


class MelDecoder(nn.Module):
    """Length-regulated frames -> predicted mel, shape (B, M, n_mels).

    Input width is d_model plus whatever latent width the variant carries;
    a linear projection brings it back to d_model before the stack.
    """

    def __init__(self, in_dim: int, config: TrainingConfig):
        super().__init__()
        self.input_projection = nn.Linear(in_dim, config.d_model)
        self.stack = TransformerStack(
            config.decoder_layers,
            config.d_model,
            config.n_heads,
            config.conv_filter_size,
            config.conv_kernel,
            config.dropout,
        )
        self.output_projection = nn.Linear(config.d_model, config.n_mels)

    def forward(self, frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.stack(self.input_projection(frames), mask)
        return self.output_projection(x)


def durations_from_log(log_durations: torch.Tensor) -> torch.Tensor:
    """Invert the log(1+d) regression target: round(exp(x) - 1), clamped at 0."""
    return torch.clamp(torch.round(torch.expm1(log_durations)), min=0).long()


def log_duration_target(durations: torch.Tensor) -> torch.Tensor:
    return torch.log1p(durations.float())
