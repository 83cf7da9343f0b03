"""Full model wiring: backbone plus optional prosody scales per variant.

Training runs the posterior path (latents inferred from the target mel,
teacher-forced durations and pitch). Inference runs the prior path:
latents come from the sampling engine, durations and pitch from the
predictors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import (
    MelDecoder,
    PitchEmbedding,
    ProsodyPredictor,
    TextEncoder,
)
from .config import TrainingConfig
from .errors import ConfigError
from .modules import length_regulate_batch
from .prosody import LatentSample, ProsodyEncoder, assemble_prosody

VARIANT_FLAGS = {
    # variant: (use_global, use_local, condition_local_on_global)
    "himuv": (True, True, True),
    "gvae": (True, False, False),
    "lvae": (False, True, False),
    "backbone": (False, False, False),
    "backbone_adv": (False, False, False),
}


@dataclass
class ModelOutput:
    """Everything the loss needs from one teacher-forced forward pass."""

    mel_pred: torch.Tensor
    log_dur_pred: torch.Tensor
    pitch_pred: torch.Tensor
    frame_mask: torch.Tensor
    global_latent: LatentSample | None = None
    local_latent: LatentSample | None = None
    local_mean_pred: torch.Tensor | None = None
    attention: torch.Tensor | None = None


class TtsModel(nn.Module):
    """Text encoder, optional two-scale prosody encoder, predictors, decoder."""

    def __init__(self, config: TrainingConfig, n_symbols: int):
        super().__init__()
        if config.variant not in VARIANT_FLAGS:
            raise ConfigError(f"unknown variant {config.variant!r}")
        config.validate()
        self.config = config
        self.variant = config.variant
        self.use_global, self.use_local, self.condition_local = VARIANT_FLAGS[config.variant]
        self.latent_dim = config.latent_dim

        self.text_encoder = TextEncoder(n_symbols, config)
        if self.use_global or self.use_local:
            self.prosody_encoder = ProsodyEncoder(
                config,
                d_text=config.d_model,
                use_global=self.use_global,
                use_local=self.use_local,
                condition_local_on_global=self.condition_local,
            )
        else:
            self.prosody_encoder = None

        in_dim = config.d_model + self.latent_dim
        self.duration_predictor = ProsodyPredictor(in_dim, config)
        self.pitch_predictor = ProsodyPredictor(in_dim, config)
        self.pitch_embedding = PitchEmbedding(config)
        self.decoder = MelDecoder(in_dim, config)

    def encode_posterior(
        self,
        h_text: torch.Tensor,
        mel: torch.Tensor,
        text_mask: torch.Tensor | None,
        mel_mask: torch.Tensor | None,
        eps_g: torch.Tensor | None = None,
        eps_l: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor | None, LatentSample | None, LatentSample | None, torch.Tensor | None, torch.Tensor | None]:
        """Posterior path: latents from the target mel.

        Returns (Z, global latent, local latent, predicted local mean,
        attention weights); Z is None for the plain backbone.
        """
        if self.prosody_encoder is None:
            return None, None, None, None, None
        enc = self.prosody_encoder
        global_latent = None
        h_g = None
        if self.use_global:
            global_latent, h_g = enc.encode_global(mel, mel_mask, eps_g, generator)
        local_latent = None
        local_mean_pred = None
        attention = None
        if self.use_local:
            if h_g is None:
                h_g = enc.mel_features(mel, mel_mask)
            h_l = enc.hidden_features(
                h_text, global_latent.z if self.condition_local else None, text_mask
            )
            local_latent, attention = enc.encode_local(
                h_l, h_g, text_mask, mel_mask, eps_l, generator
            )
            local_mean_pred = enc.predict_local_mean(h_l, text_mask)
        z = assemble_prosody(
            global_latent.z if global_latent is not None else None,
            local_latent.z if local_latent is not None else None,
            h_text.shape[1],
        )
        return z, global_latent, local_latent, local_mean_pred, attention

    def local_prior_mean(
        self,
        h_text: torch.Tensor,
        z_g: torch.Tensor | None,
        text_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Prior path: predicted local mean from text hiddens (and z^g if conditioned)."""
        enc = self.prosody_encoder
        h_l = enc.hidden_features(h_text, z_g if self.condition_local else None, text_mask)
        return enc.predict_local_mean(h_l, text_mask)

    def predict_prosody(
        self,
        h_text: torch.Tensor,
        z: torch.Tensor | None,
        text_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Duration (log domain) and pitch (normalized) from H concatenated with Z."""
        h_z = h_text if z is None else torch.cat([h_text, z], dim=-1)
        return (
            self.duration_predictor(h_z, text_mask),
            self.pitch_predictor(h_z, text_mask),
        )

    def decode(
        self,
        h_text: torch.Tensor,
        z: torch.Tensor | None,
        pitch: torch.Tensor,
        durations: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Pitch embedding added to H, latents appended, length-regulated, decoded.

        Returns (mel prediction, frame mask).
        """
        base = h_text + self.pitch_embedding(pitch)
        dec_in = base if z is None else torch.cat([base, z], dim=-1)
        frames, frame_mask = length_regulate_batch(dec_in, durations)
        return self.decoder(frames, frame_mask), frame_mask

    def forward(
        self,
        batch: dict,
        eps_g: torch.Tensor | None = None,
        eps_l: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> ModelOutput:
        """Teacher-forced training pass over a collated batch."""
        text_mask = batch["text_mask"]
        mel_mask = batch["mel_mask"]
        h_text = self.text_encoder(batch["phonemes"], text_mask)
        z, global_latent, local_latent, local_mean_pred, attention = self.encode_posterior(
            h_text, batch["mel"], text_mask, mel_mask, eps_g, eps_l, generator
        )
        log_dur_pred, pitch_pred = self.predict_prosody(h_text, z, text_mask)
        mel_pred, frame_mask = self.decode(h_text, z, batch["pitch"], batch["durations"])
        return ModelOutput(
            mel_pred=mel_pred,
            log_dur_pred=log_dur_pred,
            pitch_pred=pitch_pred,
            frame_mask=frame_mask,
            global_latent=global_latent,
            local_latent=local_latent,
            local_mean_pred=local_mean_pred,
            attention=attention,
        )


def build_variant(name: str, config: TrainingConfig, n_symbols: int) -> TtsModel:
    """Model for a named variant; overrides config.variant with `name`."""
    if name not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANT_FLAGS)}")
    if config.variant != name:
        config = TrainingConfig.from_dict({**config.to_dict(), "variant": name})
    return TtsModel(config, n_symbols)
