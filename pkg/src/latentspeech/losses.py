"""Loss terms: reconstruction, least-squares adversarial, feature matching.

KL and posterior-mean losses live next to the encoder in prosody.py.
All masked means divide by the count of valid elements, so padding never
dilutes a loss.
"""

from __future__ import annotations

import torch


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over valid elements; mask covers leading dims."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    while mask.dim() < sq.dim():
        mask = mask.unsqueeze(-1)
    mask = mask.to(sq.dtype)
    return (sq * mask).sum() / (mask.expand_as(sq).sum().clamp(min=1.0))


def recon_loss(
    mel_target: torch.Tensor,
    mel_pred: torch.Tensor,
    log_dur_target: torch.Tensor,
    log_dur_pred: torch.Tensor,
    pitch_target: torch.Tensor,
    pitch_pred: torch.Tensor,
    alpha: float,
    mel_mask: torch.Tensor | None = None,
    text_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mel MSE plus alpha-weighted duration and pitch MSE.

    Durations are compared in the log(1+d) domain; pitch in normalized
    units.
    """
    loss = masked_mse(mel_pred, mel_target, mel_mask)
    loss = loss + alpha * masked_mse(log_dur_pred, log_dur_target, text_mask)
    loss = loss + alpha * masked_mse(pitch_pred, pitch_target, text_mask)
    return loss


def adv_loss_d(score_real: torch.Tensor, score_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator loss: (D(X)-1)^2 + D(X_hat)^2, patch mean."""
    if score_real.shape != score_fake.shape:
        raise ValueError(
            f"score shape mismatch: {tuple(score_real.shape)} vs {tuple(score_fake.shape)}"
        )
    return ((score_real - 1.0) ** 2).mean() + (score_fake**2).mean()


def adv_loss_g(score_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: (D(X_hat)-1)^2, patch mean."""
    return ((score_fake - 1.0) ** 2).mean()


def feature_matching_loss(
    real_features: list[torch.Tensor], fake_features: list[torch.Tensor]
) -> torch.Tensor:
    """Sum over layers of the mean absolute feature difference."""
    if len(real_features) != len(fake_features):
        raise ValueError(
            f"feature list length mismatch: {len(real_features)} vs {len(fake_features)}"
        )
    total = None
    for real, fake in zip(real_features, fake_features):
        if real.shape != fake.shape:
            raise ValueError(f"feature shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
        term = (real - fake).abs().mean()
        total = term if total is None else total + term
    return total
