"""Training configuration: every tunable in one dataclass.

The config serializes to a flat ``key = value`` text file and is echoed
verbatim into every checkpoint, so a run is always reproducible from its
artifacts alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("himuv", "gvae", "lvae", "backbone", "backbone_adv")


@dataclass
class TrainingConfig:
    # audio / mel
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    mel_fmin: float = 0.0
    mel_fmax: float = 8000.0
    mel_floor: float = 1e-5  # linear clamp before log

    # pitch tracker
    pitch_fmin: float = 60.0
    pitch_fmax: float = 500.0
    voicing_threshold: float = 0.3

    # backbone dims
    d_model: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 4
    n_heads: int = 2
    conv_kernel: int = 3
    conv_filter_size: int = 1024
    dropout: float = 0.1
    predictor_hidden: int = 256
    predictor_layers: int = 2
    pitch_embed_kernel: int = 3

    # prosody encoder dims
    d_enc: int = 128
    latent_global_dim: int = 32
    latent_local_dim: int = 16
    mel_encoder_blocks: int = 2
    attention_heads: int = 2

    # discriminator
    disc_channels: int = 32
    disc_layers: int = 4

    # optimization
    variant: str = "himuv"
    lr: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    weight_decay: float = 0.0
    warmup_steps: int = 4000
    lr_decay: str = "invsqrt"  # or "constant"
    grad_clip: float = 1.0
    batch_size: int = 32
    total_steps: int = 200000
    checkpoint_every: int = 10000
    log_every: int = 1
    seed: int = 1234

    # loss weights
    alpha: float = 0.01   # duration/pitch regression weight
    gamma: float = 0.01   # posterior-mean prediction weight
    delta: float = 0.01   # feature-matching weight
    adversarial: bool = True
    beta_g_max: float = 1e-7
    beta_l_max: float = 1e-4
    kl_ramp_start: int = 10000
    kl_ramp_end: int = 60000

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (0 <= self.kl_ramp_start < self.kl_ramp_end <= self.total_steps):
            raise ConfigError(
                "kl ramp must satisfy 0 <= kl_ramp_start < kl_ramp_end <= total_steps, "
                f"got {self.kl_ramp_start}..{self.kl_ramp_end} with total_steps={self.total_steps}"
            )
        for name in ("alpha", "gamma", "delta", "beta_g_max", "beta_l_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.lr_decay not in ("invsqrt", "constant"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.win_length > self.n_fft:
            raise ConfigError("win_length cannot exceed n_fft")
        if self.hop_length <= 0 or self.win_length <= 0:
            raise ConfigError("hop_length and win_length must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_enc % self.attention_heads != 0:
            raise ConfigError("d_enc must be divisible by attention_heads")

    @property
    def latent_dim(self) -> int:
        """Width of the prosody embedding for the configured variant."""
        if self.variant in ("backbone", "backbone_adv"):
            return 0
        if self.variant == "gvae":
            return self.latent_global_dim
        if self.variant == "lvae":
            return self.latent_local_dim
        return self.latent_global_dim + self.latent_local_dim

    @property
    def adversarial_enabled(self) -> bool:
        """Effective adversarial switch; backbone variants pin it."""
        if self.variant == "backbone":
            return False
        if self.variant == "backbone_adv":
            return True
        return self.adversarial

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


def field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(TrainingConfig)]


def _parse_value(key: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse config value {key} = {raw!r} as {target_type.__name__}") from exc


def load_config(path: str | Path, overrides: dict | None = None) -> TrainingConfig:
    """Read a flat ``key = value`` config file, then apply overrides."""
    types = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    defaults = TrainingConfig()
    values: dict = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw, type(getattr(defaults, key)))
    if overrides:
        values = apply_overrides(values, overrides)
    return TrainingConfig.from_dict(values)


def apply_overrides(base: dict, overrides: dict) -> dict:
    """Coerce string overrides (from ``--set key=value`` flags) to field types."""
    defaults = TrainingConfig()
    out = dict(base)
    for key, raw in overrides.items():
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(raw, str):
            out[key] = _parse_value(key, raw, type(getattr(defaults, key)))
        else:
            out[key] = raw
    return out


def save_config(config: TrainingConfig, path: str | Path) -> None:
    """Write the effective config as a flat key = value file."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(TrainingConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
