"""Two-scale latent prosody encoder.

The global scale summarizes the whole mel spectrogram into one vector;
the local scale produces one vector per phoneme, conditioned on the
global sample and the text hiddens, attending over mel-level features.
A separate predictor regresses the local posterior mean from H^l so the
local prior can be text-dependent at inference, when no mel exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .config import TrainingConfig

SIGMA_FLOOR = 1e-4


@dataclass
class LatentSample:
    """One reparameterized draw: z = mu + sigma * eps, with eps recorded."""

    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    eps: torch.Tensor


def reparameterize(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LatentSample:
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return LatentSample(mu=mu, sigma=sigma, z=mu + sigma * eps, eps=eps)


def split_posterior(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a projection into (mu, sigma); sigma via softplus with a small floor."""
    mu, raw_sigma = raw.chunk(2, dim=-1)
    return mu, F.softplus(raw_sigma) + SIGMA_FLOOR


def _run_bigru(gru: nn.GRU, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """BiGRU over padded batches without leaking pad frames into the backward pass."""
    if mask is None:
        return gru(x)[0]
    lengths = mask.sum(dim=1).cpu()
    packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
    out, _ = gru(packed)
    return pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])[0]


class GatedConvBlock(nn.Module):
    """Residual 1-d convolution with GLU gating, time length preserved."""

    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.conv = nn.Conv1d(dim, 2 * dim, kernel, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.glu(self.conv(x.transpose(1, 2)), dim=1).transpose(1, 2)
        return self.norm(x + self.dropout(y))


class MelEncoder(nn.Module):
    """Mel frames -> frame-level features H^g, shape (B, M, d_enc). No downsampling."""

    def __init__(self, config: TrainingConfig):
        super().__init__()
        self.input_projection = nn.Linear(config.n_mels, config.d_enc)
        self.blocks = nn.ModuleList(
            GatedConvBlock(config.d_enc, config.conv_kernel, config.dropout)
            for _ in range(config.mel_encoder_blocks)
        )

    def forward(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.input_projection(mel)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        for block in self.blocks:
            x = block(x)
            if mask is not None:
                x = x * mask.unsqueeze(-1)
        return x


class GlobalPosterior(nn.Module):
    """H^g -> (mu, sigma) of the utterance-level latent."""

    def __init__(self, config: TrainingConfig):
        super().__init__()
        self.gru = nn.GRU(
            config.d_enc, config.d_enc, num_layers=2, bidirectional=True, batch_first=True
        )
        self.projection = nn.Linear(2 * config.d_enc, 2 * config.latent_global_dim)

    def forward(
        self, h_g: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        out = _run_bigru(self.gru, h_g, mask)
        if mask is None:
            pooled = out.mean(dim=1)
        else:
            weights = mask.unsqueeze(-1).to(out.dtype)
            pooled = (out * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
        return split_posterior(self.projection(pooled))


class HiddenEncoder(nn.Module):
    """(H, replicated z^g) -> H^l via two conv + layer-norm blocks."""

    def __init__(self, in_dim: int, config: TrainingConfig):
        super().__init__()
        pad = config.conv_kernel // 2
        self.conv1 = nn.Conv1d(in_dim, config.d_enc, config.conv_kernel, padding=pad)
        self.norm1 = nn.LayerNorm(config.d_enc)
        self.conv2 = nn.Conv1d(config.d_enc, config.d_enc, config.conv_kernel, padding=pad)
        self.norm2 = nn.LayerNorm(config.d_enc)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x.transpose(1, 2)).transpose(1, 2)))
        x = F.relu(self.norm2(self.conv2(x.transpose(1, 2)).transpose(1, 2)))
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        return x


class LocalPosterior(nn.Module):
    """Cross-attention over H^g, then BiGRU + linear to per-phoneme (mu, sigma)."""

    def __init__(self, config: TrainingConfig):
        super().__init__()
        self.attention = nn.MultiheadAttention(
            config.d_enc, config.attention_heads, batch_first=True
        )
        self.gru = nn.GRU(
            config.d_enc, config.d_enc, num_layers=2, bidirectional=True, batch_first=True
        )
        self.projection = nn.Linear(2 * config.d_enc, 2 * config.latent_local_dim)

    def forward(
        self,
        h_l: torch.Tensor,
        h_g: torch.Tensor,
        text_mask: torch.Tensor | None = None,
        mel_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (mu, sigma, attention weights averaged over heads)."""
        key_padding = None if mel_mask is None else ~mel_mask
        attended, weights = self.attention(
            h_l, h_g, h_g, key_padding_mask=key_padding, need_weights=True
        )
        out = _run_bigru(self.gru, attended, text_mask)
        mu, sigma = split_posterior(self.projection(out))
        return mu, sigma, weights


class PosteriorMeanPredictor(nn.Module):
    """H^l -> predicted local posterior mean, BiGRU + linear.

    The input is detached by the caller; this module never shapes the
    encoder through its loss.
    """

    def __init__(self, config: TrainingConfig):
        super().__init__()
        self.gru = nn.GRU(
            config.d_enc, config.d_enc, num_layers=2, bidirectional=True, batch_first=True
        )
        self.projection = nn.Linear(2 * config.d_enc, config.latent_local_dim)

    def forward(self, h_l: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.projection(_run_bigru(self.gru, h_l, mask))


def replicate_global(z_g: torch.Tensor, n_steps: int) -> torch.Tensor:
    """(B, D) -> (B, n_steps, D) by repetition."""
    return z_g.unsqueeze(1).expand(-1, n_steps, -1)


def assemble_prosody(z_g: torch.Tensor | None, z_l: torch.Tensor | None, n_steps: int) -> torch.Tensor:
    """Concatenate replicated z^g with per-phoneme z^l into (B, N, D_g + D_l).

    Either scale may be absent (variant composition); at least one must be
    present.
    """
    parts = []
    if z_g is not None:
        parts.append(replicate_global(z_g, n_steps))
    if z_l is not None:
        parts.append(z_l)
    if not parts:
        raise ValueError("no latent scales to assemble")
    return torch.cat(parts, dim=-1)


def kl_standard_normal(
    mu: torch.Tensor, sigma: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over every element.

    mask (matching all but the last dim) excludes padded steps from the sum.
    """
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    per_element = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * torch.log(sigma))
    if mask is not None:
        per_element = per_element * mask.unsqueeze(-1)
    return per_element.sum()


def posterior_mean_loss(
    mu_l: torch.Tensor, mu_hat: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Sum over phoneme steps of the per-step MSE between mu_l and mu_hat.

    mu_l arrives detached; only the predictor learns from this loss.
    """
    if mu_l.shape != mu_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(mu_l.shape)} vs {tuple(mu_hat.shape)}")
    per_step = ((mu_l - mu_hat) ** 2).mean(dim=-1)
    if mask is not None:
        per_step = per_step * mask
    return per_step.sum()


class ProsodyEncoder(nn.Module):
    """Composes the two scales; either can be switched off for ablations.

    use_global: utterance-level latent from the mel.
    use_local: per-phoneme latents via cross-attention over mel features.
    condition_local_on_global: feed replicated z^g into the hidden-encoder
    (off for the local-only ablation).
    """

    def __init__(
        self,
        config: TrainingConfig,
        d_text: int,
        use_global: bool = True,
        use_local: bool = True,
        condition_local_on_global: bool = True,
    ):
        super().__init__()
        if not use_global and not use_local:
            raise ValueError("prosody encoder needs at least one latent scale")
        if condition_local_on_global and not (use_global and use_local):
            condition_local_on_global = False
        self.config = config
        self.use_global = use_global
        self.use_local = use_local
        self.condition_local_on_global = condition_local_on_global

        self.mel_encoder = MelEncoder(config)
        self.global_posterior = GlobalPosterior(config) if use_global else None
        if use_local:
            in_dim = d_text + (config.latent_global_dim if condition_local_on_global else 0)
            self.hidden_encoder = HiddenEncoder(in_dim, config)
            self.local_posterior = LocalPosterior(config)
            self.mean_predictor = PosteriorMeanPredictor(config)
        else:
            self.hidden_encoder = None
            self.local_posterior = None
            self.mean_predictor = None

    def mel_features(self, mel: torch.Tensor, mel_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Frame-level features H^g used by both scales."""
        return self.mel_encoder(mel, mel_mask)

    def encode_global(
        self,
        mel: torch.Tensor,
        mel_mask: torch.Tensor | None = None,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[LatentSample, torch.Tensor]:
        """Returns the global latent sample and H^g for the local scale."""
        h_g = self.mel_features(mel, mel_mask)
        mu, sigma = self.global_posterior(h_g, mel_mask)
        return reparameterize(mu, sigma, eps, generator), h_g

    def hidden_features(self, h_text: torch.Tensor, z_g: torch.Tensor | None,
                        text_mask: torch.Tensor | None = None) -> torch.Tensor:
        """H^l from text hiddens, optionally conditioned on the global sample."""
        if self.condition_local_on_global:
            if z_g is None:
                raise ValueError("this encoder conditions on z_g, but none was given")
            x = torch.cat([h_text, replicate_global(z_g, h_text.shape[1])], dim=-1)
        else:
            x = h_text
        return self.hidden_encoder(x, text_mask)

    def encode_local(
        self,
        h_l: torch.Tensor,
        h_g: torch.Tensor,
        text_mask: torch.Tensor | None = None,
        mel_mask: torch.Tensor | None = None,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[LatentSample, torch.Tensor]:
        """Returns the local latent sample and the attention weights."""
        mu, sigma, weights = self.local_posterior(h_l, h_g, text_mask, mel_mask)
        return reparameterize(mu, sigma, eps, generator), weights

    def predict_local_mean(
        self, h_l: torch.Tensor, text_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Predicted posterior mean from stop-gradient H^l."""
        return self.mean_predictor(h_l.detach(), text_mask)
