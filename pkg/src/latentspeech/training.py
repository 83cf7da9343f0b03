"""Training loop: loss assembly, KL annealing, optimization, checkpoints.

Everything is seeded and single-threaded so a fixed config replays the
exact same loss trace. Checkpoints carry the config echo, the phoneme
vocabulary, and pitch statistics, so synthesis needs nothing but the
checkpoint file.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from pathlib import Path

import torch

from .config import TrainingConfig
from .data import BatchIterator, CorpusCache
from .discriminator import MelDiscriminator
from .errors import CheckpointError, TrainingError
from .losses import adv_loss_d, adv_loss_g, feature_matching_loss, recon_loss
from .backbone import log_duration_target
from .model import ModelOutput, TtsModel, build_variant
from .prosody import kl_standard_normal, posterior_mean_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

METRICS_FIELDS = [
    "step",
    "l_recon",
    "l_kl_g",
    "l_kl_l",
    "l_post",
    "l_adv_g",
    "l_adv_d",
    "l_fm",
    "beta_g",
    "beta_l",
    "grad_norm",
]


def kl_weight_schedule(step: int, config: TrainingConfig) -> tuple[float, float]:
    """Linear ramp of (beta_g, beta_l) from ramp start to ramp end, then flat."""
    if step <= config.kl_ramp_start:
        return 0.0, 0.0
    if step >= config.kl_ramp_end:
        return config.beta_g_max, config.beta_l_max
    frac = (step - config.kl_ramp_start) / (config.kl_ramp_end - config.kl_ramp_start)
    return frac * config.beta_g_max, frac * config.beta_l_max


def lr_factor(step: int, config: TrainingConfig) -> float:
    """Warm-up then inverse-square-root decay (or flat), relative to config.lr."""
    step = max(step, 1)
    warmup = max(config.warmup_steps, 1)
    if config.lr_decay == "constant":
        return min(1.0, step / warmup)
    return min(step / warmup, math.sqrt(warmup / step))


def generator_loss_terms(
    output: ModelOutput,
    batch: dict,
    config: TrainingConfig,
    beta_g: float,
    beta_l: float,
) -> dict[str, torch.Tensor]:
    """Non-adversarial generator loss terms for one batch (KL terms already beta-weighted)."""
    batch_size = batch["mel"].shape[0]
    terms = {}
    terms["l_recon"] = recon_loss(
        batch["mel"],
        output.mel_pred,
        log_duration_target(batch["durations"]),
        output.log_dur_pred,
        batch["pitch"],
        output.pitch_pred,
        config.alpha,
        mel_mask=batch["mel_mask"],
        text_mask=batch["text_mask"],
    )
    zero = torch.zeros((), dtype=output.mel_pred.dtype, device=output.mel_pred.device)
    if output.global_latent is not None:
        kl_g = kl_standard_normal(output.global_latent.mu, output.global_latent.sigma)
        terms["l_kl_g"] = beta_g * kl_g / batch_size
    else:
        terms["l_kl_g"] = zero
    if output.local_latent is not None:
        kl_l = kl_standard_normal(
            output.local_latent.mu, output.local_latent.sigma, batch["text_mask"]
        )
        terms["l_kl_l"] = beta_l * kl_l / batch_size
        terms["l_post"] = (
            posterior_mean_loss(
                output.local_latent.mu.detach(), output.local_mean_pred, batch["text_mask"]
            )
            / batch_size
        )
    else:
        terms["l_kl_l"] = zero
        terms["l_post"] = zero
    return terms


def adversarial_scores(
    discriminator: MelDiscriminator,
    mel: torch.Tensor,
    mel_pred: torch.Tensor,
    mel_lengths: torch.Tensor,
    detach_fake: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean discriminator losses; per-utterance scoring because lengths differ.

    Returns (l_adv over the relevant side, l_fm) when detach_fake is False,
    or (l_adv_d, zero) when True.
    """
    terms_adv = []
    terms_fm = []
    for b in range(mel.shape[0]):
        m = int(mel_lengths[b].item())
        real = mel[b, :m]
        fake = mel_pred[b, :m]
        if detach_fake:
            score_real, _ = discriminator(real)
            score_fake, _ = discriminator(fake.detach())
            terms_adv.append(adv_loss_d(score_real, score_fake))
        else:
            with torch.no_grad():
                _, feats_real = discriminator(real)
            score_fake, feats_fake = discriminator(fake)
            terms_adv.append(adv_loss_g(score_fake))
            terms_fm.append(feature_matching_loss(feats_real, feats_fake))
    adv = torch.stack(terms_adv).mean()
    fm = torch.stack(terms_fm).mean() if terms_fm else torch.zeros_like(adv)
    return adv, fm


def total_generator_loss(terms: dict[str, torch.Tensor], config: TrainingConfig) -> torch.Tensor:
    """Sum of all generator terms; KL arrive beta-weighted, post/fm are weighted here."""
    total = terms["l_recon"] + terms["l_kl_g"] + terms["l_kl_l"]
    if config.gamma > 0:
        total = total + config.gamma * terms["l_post"]
    total = total + terms.get("l_adv_g", 0.0)
    if config.delta > 0:
        total = total + config.delta * terms.get("l_fm", torch.zeros(()))
    return total


def _check_finite(terms: dict[str, torch.Tensor], step: int) -> None:
    for name, value in terms.items():
        if isinstance(value, torch.Tensor) and not torch.isfinite(value).all():
            raise TrainingError(f"non-finite loss term {name} at step {step}: {value.item()}")


def save_checkpoint(state: dict, path: str | Path) -> None:
    """Atomic write: serialize next to the target, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or "format_version" not in state:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if state["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {state['format_version']} != supported {CHECKPOINT_VERSION}"
        )
    return state


class Trainer:
    """Owns the model, the optional discriminator, and both optimizers."""

    def __init__(self, config: TrainingConfig, cache: CorpusCache, out_dir: str | Path):
        config.validate()
        self.config = config
        self.cache = cache
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.model = build_variant(config.variant, config, cache.n_symbols)
        self.config = self.model.config  # picks up any variant normalization

        self.adversarial = self.config.adversarial_enabled
        if self.adversarial:
            self.discriminator = MelDiscriminator(self.config)
            self.optimizer_d = torch.optim.Adam(
                self.discriminator.parameters(),
                lr=config.lr,
                betas=(config.adam_beta1, config.adam_beta2),
                weight_decay=config.weight_decay,
            )
        else:
            self.discriminator = None
            self.optimizer_d = None
        self.optimizer_g = torch.optim.Adam(
            self.model.parameters(),
            lr=config.lr,
            betas=(config.adam_beta1, config.adam_beta2),
            weight_decay=config.weight_decay,
        )

        self.iterator = BatchIterator(cache, config.batch_size, seed=config.seed)
        self.step_count = 0
        self.metrics_path = self.out_dir / "metrics.csv"
        self._metrics_file = None
        self._metrics_writer = None
        self.last_metrics: dict[str, float] = {}

    def _open_metrics(self):
        if self._metrics_writer is None:
            new_file = not self.metrics_path.exists()
            self._metrics_file = open(self.metrics_path, "a", newline="")
            self._metrics_writer = csv.writer(self._metrics_file)
            if new_file:
                self._metrics_writer.writerow(METRICS_FIELDS)

    def _set_lr(self):
        factor = lr_factor(self.step_count, self.config)
        for opt in filter(None, (self.optimizer_g, self.optimizer_d)):
            for group in opt.param_groups:
                group["lr"] = self.config.lr * factor

    def train_step(self) -> dict[str, float]:
        """One optimization step: discriminator first (if any), then generator."""
        self.step_count += 1
        self._set_lr()
        batch = self.iterator.batch_at(self.step_count - 1)
        beta_g, beta_l = kl_weight_schedule(self.step_count, self.config)

        self.model.train()
        output = self.model(batch, generator=self.generator)
        terms = generator_loss_terms(output, batch, self.config, beta_g, beta_l)

        if self.adversarial:
            self.discriminator.train()
            l_adv_d, _ = adversarial_scores(
                self.discriminator, batch["mel"], output.mel_pred,
                batch["mel_lengths"], detach_fake=True,
            )
            _check_finite({"l_adv_d": l_adv_d}, self.step_count)
            self.optimizer_d.zero_grad()
            l_adv_d.backward()
            torch.nn.utils.clip_grad_norm_(self.discriminator.parameters(), self.config.grad_clip)
            self.optimizer_d.step()

            terms["l_adv_g"], terms["l_fm"] = adversarial_scores(
                self.discriminator, batch["mel"], output.mel_pred,
                batch["mel_lengths"], detach_fake=False,
            )
            terms["l_adv_d"] = l_adv_d.detach()
        else:
            zero = torch.zeros(())
            terms["l_adv_g"] = zero
            terms["l_fm"] = zero
            terms["l_adv_d"] = zero

        total = total_generator_loss(terms, self.config)
        terms["l_final"] = total
        _check_finite(terms, self.step_count)

        self.optimizer_g.zero_grad()
        total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(
            self.model.parameters(), self.config.grad_clip
        )
        self.optimizer_g.step()

        metrics = {name: float(value.item()) for name, value in terms.items()}
        metrics["step"] = self.step_count
        metrics["beta_g"] = beta_g
        metrics["beta_l"] = beta_l
        metrics["grad_norm"] = float(grad_norm.item())
        self.last_metrics = metrics

        if self.step_count % self.config.log_every == 0:
            self._open_metrics()
            self._metrics_writer.writerow(
                [metrics["step"]] + [f"{metrics[k]:.8g}" for k in METRICS_FIELDS[1:]]
            )
            self._metrics_file.flush()
        return metrics

    def train(self, steps: int | None = None) -> None:
        """Run to total_steps (or `steps` more), checkpointing along the way."""
        target = self.step_count + steps if steps is not None else self.config.total_steps
        while self.step_count < target:
            metrics = self.train_step()
            if self.step_count % self.config.checkpoint_every == 0:
                self.save(self.out_dir / f"checkpoint_{self.step_count:08d}.pt")
            if self.step_count % max(1, self.config.log_every * 100) == 0:
                logger.info(
                    "step %d: l_recon %.4f l_final %.4f",
                    self.step_count, metrics["l_recon"], metrics["l_final"],
                )
        self.save(self.out_dir / "checkpoint_last.pt")

    def checkpoint_state(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "step": self.step_count,
            "config": self.config.to_dict(),
            "n_symbols": self.cache.n_symbols,
            "vocab": self.cache.vocab,
            "pitch_mean": self.cache.pitch_mean,
            "pitch_sd": self.cache.pitch_sd,
            "normalize_pitch": self.cache.normalize_pitch,
            "model_state": self.model.state_dict(),
            "discriminator_state": (
                self.discriminator.state_dict() if self.discriminator else None
            ),
            "optimizer_g_state": self.optimizer_g.state_dict(),
            "optimizer_d_state": self.optimizer_d.state_dict() if self.optimizer_d else None,
            "sample_rng": self.generator.get_state(),
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        save_checkpoint(self.checkpoint_state(), path)
        logger.info("saved checkpoint %s at step %d", path, self.step_count)
        return path

    def restore(self, path: str | Path) -> None:
        """Resume from a checkpoint saved by this trainer shape."""
        state = load_checkpoint(path)
        if state["config"] != self.config.to_dict():
            raise CheckpointError(f"{path}: config mismatch with this trainer")
        self.model.load_state_dict(state["model_state"])
        if self.discriminator is not None and state["discriminator_state"] is not None:
            self.discriminator.load_state_dict(state["discriminator_state"])
        self.optimizer_g.load_state_dict(state["optimizer_g_state"])
        if self.optimizer_d is not None and state["optimizer_d_state"] is not None:
            self.optimizer_d.load_state_dict(state["optimizer_d_state"])
        self.generator.set_state(state["sample_rng"])
        torch.set_rng_state(state["torch_rng"])
        self.step_count = state["step"]

    def close(self):
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None
            self._metrics_writer = None


def build_model_from_checkpoint(state: dict) -> TtsModel:
    """Reconstruct the trained model (eval mode) from a loaded checkpoint dict."""
    config = TrainingConfig.from_dict(state["config"])
    model = build_variant(config.variant, config, state["n_symbols"])
    model.load_state_dict(state["model_state"])
    model.eval()
    return model
