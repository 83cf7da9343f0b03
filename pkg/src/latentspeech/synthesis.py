"""Inference: temperature-controlled prior sampling and text-to-mel synthesis.

At inference the global prior is N(0, tau^2 I) and the local prior is
N(mu_hat, tau^2 I), with mu_hat regressed from text-side features. The
sampling modes freeze one scale at a deterministic value so diversity can
be attributed to the other; every draw carries an audit record saying
exactly where each latent came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio
from .backbone import durations_from_log
from .data import encode_phonemes
from .errors import ConfigError, DataError, DegenerateOutputError
from .model import TtsModel
from .prosody import assemble_prosody
from .training import build_model_from_checkpoint, load_checkpoint

MODES = ("full", "global_only", "local_only", "none")


@dataclass
class SamplingSpec:
    """How to draw latents for one synthesis call.

    tau scales the prior SD of whichever scales the mode samples; tau_g and
    tau_l override it per scale. Fixed latents replace the deterministic
    fallback of a frozen scale (fixed_z_l in global_only, fixed_z_g in
    local_only, either in none).
    """

    mode: str = "full"
    tau: float = 1.0
    seed: int = 0
    tau_g: float | None = None
    tau_l: float | None = None
    fixed_z_g: np.ndarray | None = None
    fixed_z_l: np.ndarray | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown sampling mode {self.mode!r}; expected one of {MODES}")
        for name, value in (("tau", self.tau), ("tau_g", self.tau_g), ("tau_l", self.tau_l)):
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if self.mode == "full" and (self.fixed_z_g is not None or self.fixed_z_l is not None):
            raise ConfigError("fixed latents contradict full mode; use global_only/local_only/none")

    def resolved_taus(self) -> tuple[float, float]:
        """Effective (tau_g, tau_l); frozen scales get 0."""
        tau_g = self.tau if self.tau_g is None else self.tau_g
        tau_l = self.tau if self.tau_l is None else self.tau_l
        if self.mode in ("local_only", "none"):
            tau_g = 0.0
        if self.mode in ("global_only", "none"):
            tau_l = 0.0
        return tau_g, tau_l


def _as_tensor(value: np.ndarray, shape: tuple, name: str) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(value), dtype=torch.float32)
    if tuple(tensor.shape) != shape:
        raise ConfigError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")
    return tensor


def sample_prior(
    model: TtsModel,
    h_text: torch.Tensor,
    spec: SamplingSpec,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor | None, dict]:
    """Draw the prosody embedding Z from the prior per the sampling spec.

    Draw order is fixed: z^g first, then H^l, then the predicted local
    mean, so a given generator state always yields the same latents.
    Returns (Z or None, audit record).
    """
    spec.validate()
    n_steps = h_text.shape[1]
    cfg = model.config
    tau_g, tau_l = spec.resolved_taus()
    audit: dict = {
        "mode": spec.mode,
        "tau": spec.tau,
        "tau_g": tau_g,
        "tau_l": tau_l,
        "seed": spec.seed,
        "z_g": None,
        "z_g_source": "absent",
        "z_l": None,
        "z_l_source": "absent",
    }

    if spec.mode == "global_only" and not model.use_global:
        raise ConfigError(f"variant {model.variant!r} has no global scale to sample")
    if spec.mode == "local_only" and not model.use_local:
        raise ConfigError(f"variant {model.variant!r} has no local scale to sample")

    z_g = None
    if model.use_global:
        if spec.mode in ("local_only", "none"):
            if spec.fixed_z_g is not None:
                z_g = _as_tensor(spec.fixed_z_g, (cfg.latent_global_dim,), "fixed_z_g").unsqueeze(0)
                audit["z_g_source"] = "fixed"
            else:
                z_g = h_text.new_zeros(1, cfg.latent_global_dim)
                audit["z_g_source"] = "zero"
        else:
            eps = torch.randn(1, cfg.latent_global_dim, generator=generator, dtype=h_text.dtype)
            z_g = tau_g * eps
            audit["z_g_source"] = "sampled" if tau_g > 0 else "zero"
        audit["z_g"] = z_g.squeeze(0).tolist()

    z_l = None
    if model.use_local:
        if spec.mode == "global_only":
            if spec.fixed_z_l is not None:
                z_l = _as_tensor(
                    spec.fixed_z_l, (n_steps, cfg.latent_local_dim), "fixed_z_l"
                ).unsqueeze(0)
                audit["z_l_source"] = "fixed"
            else:
                # zero-temperature baseline, independent of the drawn z^g so
                # the local record is identical across seeds
                baseline = h_text.new_zeros(1, cfg.latent_global_dim) if model.condition_local else None
                z_l = model.local_prior_mean(h_text, baseline)
                audit["z_l_source"] = "predicted_mean"
        else:
            if spec.mode == "none" and spec.fixed_z_l is not None:
                z_l = _as_tensor(
                    spec.fixed_z_l, (n_steps, cfg.latent_local_dim), "fixed_z_l"
                ).unsqueeze(0)
                audit["z_l_source"] = "fixed"
            else:
                mu_hat = model.local_prior_mean(h_text, z_g)
                if tau_l > 0:
                    eps = torch.randn(
                        1, n_steps, cfg.latent_local_dim, generator=generator, dtype=h_text.dtype
                    )
                    z_l = mu_hat + tau_l * eps
                    audit["z_l_source"] = "sampled"
                else:
                    z_l = mu_hat
                    audit["z_l_source"] = "predicted_mean"
        audit["z_l"] = z_l.squeeze(0).tolist()

    if z_g is None and z_l is None:
        return None, audit
    return assemble_prosody(z_g, z_l, n_steps), audit


@dataclass
class SynthesisResult:
    """One synthesized utterance plus its prosody report."""

    mel: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    pitch_hz: np.ndarray
    audit: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])


class Synthesizer:
    """Read-only inference wrapper around a trained checkpoint."""

    def __init__(
        self,
        model: TtsModel,
        vocab: dict[str, int],
        pitch_mean: float,
        pitch_sd: float,
        normalize_pitch: bool,
    ):
        self.model = model.eval()
        self.config = model.config
        self.vocab = vocab
        self.pitch_mean = pitch_mean
        self.pitch_sd = pitch_sd
        self.normalize_pitch = normalize_pitch

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Synthesizer":
        state = load_checkpoint(path)
        return cls(
            model=build_model_from_checkpoint(state),
            vocab=state["vocab"],
            pitch_mean=state["pitch_mean"],
            pitch_sd=state["pitch_sd"],
            normalize_pitch=state["normalize_pitch"],
        )

    def encode_text(self, text: str) -> torch.Tensor:
        """Space-separated phoneme symbols -> id tensor (1, N)."""
        symbols = text.split()
        if not symbols:
            raise DataError("empty phoneme sequence")
        ids = encode_phonemes(symbols, self.vocab)
        return torch.from_numpy(ids).unsqueeze(0)

    def denormalize_pitch(self, pitch: np.ndarray) -> np.ndarray:
        if not self.normalize_pitch:
            return pitch.copy()
        return (pitch * self.pitch_sd + self.pitch_mean).astype(np.float32)

    def synthesize(self, text: str, spec: SamplingSpec) -> SynthesisResult:
        """Text-to-mel through the prior path; deterministic given (text, seed).

        Runs single-threaded so repeated calls are bitwise identical.
        """
        previous_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            with torch.no_grad():
                ids = self.encode_text(text)
                h_text = self.model.text_encoder(ids)
                generator = torch.Generator().manual_seed(spec.seed)
                z, audit = sample_prior(self.model, h_text, spec, generator)
                log_dur, pitch_pred = self.model.predict_prosody(h_text, z)
                durations = durations_from_log(log_dur)
                total = int(durations.sum().item())
                if total == 0:
                    raise DegenerateOutputError(
                        "all predicted durations rounded to zero frames"
                    )
                mel, _ = self.model.decode(h_text, z, pitch_pred, durations)
        finally:
            torch.set_num_threads(previous_threads)

        pitch_np = pitch_pred.squeeze(0).numpy().astype(np.float32)
        return SynthesisResult(
            mel=mel.squeeze(0).numpy().astype(np.float32),
            durations=durations.squeeze(0).numpy(),
            pitch=pitch_np,
            pitch_hz=self.denormalize_pitch(pitch_np),
            audit=audit,
        )

    def write_sample(
        self,
        result: SynthesisResult,
        out_dir: str | Path,
        stem: str,
        wav_iterations: int | None = None,
    ) -> dict[str, Path]:
        """Write `<stem>_mel.npy` + `<stem>.json` (and a WAV when requested)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"mel": out_dir / f"{stem}_mel.npy", "sidecar": out_dir / f"{stem}.json"}
        np.save(paths["mel"], result.mel)
        sidecar = {
            "n_frames": result.n_frames,
            "hop_length": self.config.hop_length,
            "sample_rate": self.config.sample_rate,
            "durations": result.durations.tolist(),
            "pitch": [float(v) for v in result.pitch],
            "pitch_hz": [float(v) for v in result.pitch_hz],
            "audit": result.audit,
        }
        paths["sidecar"].write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if wav_iterations is not None:
            wave = audio.invert_mel(result.mel, self.config, iterations=wav_iterations)
            paths["wav"] = out_dir / f"{stem}.wav"
            audio.save_wav(paths["wav"], wave, self.config.sample_rate)
        return paths
