"""Shared fixtures: a tiny on-disk corpus, small model configs, synthetic batches."""

import numpy as np
import pytest

from latentspeech import audio, data
from latentspeech.config import TrainingConfig

PHONES = ["AA", "B", "IY", "K", "S", "T"]


def split_frames(total: int, parts: int) -> list[int]:
    """Split `total` frames into `parts` positive-ish chunks, preserving the sum."""
    base = total // parts
    rem = total - base * parts
    return [base + (1 if i < rem else 0) for i in range(parts)]


def build_corpus(root, n_utterances=4, config: TrainingConfig | None = None, seed=0):
    """Write WAVs, .dur alignments, and a manifest under `root`.

    Each utterance is an amplitude-modulated sine at a distinct frequency, so
    the pitch tracker finds voiced frames and utterances are distinguishable.
    Returns the manifest path.
    """
    cfg = config or TrainingConfig()
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_utterances):
        n_samples = int(cfg.sample_rate * (0.25 + 0.05 * (i % 3)))
        t = np.arange(n_samples) / cfg.sample_rate
        freq = 160.0 + 35.0 * i
        envelope = 0.6 + 0.3 * np.sin(2 * np.pi * 1.5 * t + rng.uniform(0, np.pi))
        wav = (0.5 * envelope * np.sin(2 * np.pi * freq * t)).astype(np.float32)
        stem = f"utt{i:03d}"
        audio.save_wav(root / f"{stem}.wav", wav, cfg.sample_rate)

        n_frames = audio.frame_count(n_samples, cfg.hop_length)
        n_phones = 3 + i % 3
        durations = split_frames(n_frames, n_phones)
        (root / f"{stem}.dur").write_text(" ".join(str(d) for d in durations) + "\n")

        symbols = [PHONES[(i + j) % len(PHONES)] for j in range(n_phones)]
        lines.append(f"{stem}.wav|{' '.join(symbols)}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@pytest.fixture()
def corpus_manifest(tmp_path):
    return build_corpus(tmp_path / "corpus")


def tiny_model_config(**overrides) -> TrainingConfig:
    """Config shrunk for fast CPU tests; model geometry only, audio untouched."""
    values = dict(
        d_model=32,
        encoder_layers=2,
        decoder_layers=2,
        n_heads=2,
        conv_filter_size=64,
        predictor_hidden=32,
        predictor_layers=1,
        d_enc=32,
        latent_global_dim=8,
        latent_local_dim=4,
        mel_encoder_blocks=1,
        disc_channels=8,
        batch_size=2,
        dropout=0.0,
    )
    values.update(overrides)
    return TrainingConfig(**values)


@pytest.fixture()
def tiny_config():
    return tiny_model_config()


def synthetic_batch(n_symbols=10, batch=2, max_phones=5, n_mels=80, seed=0):
    """Collated batch of random utterances with consistent duration/mel lengths."""
    rng = np.random.default_rng(seed)
    items = []
    for b in range(batch):
        n = int(rng.integers(2, max_phones + 1))
        durations = rng.integers(1, 5, size=n)
        m = int(durations.sum())
        items.append(
            {
                "stem": f"synth{b}",
                "phonemes": rng.integers(1, n_symbols, size=n).astype(np.int64),
                "mel": rng.standard_normal((m, n_mels)).astype(np.float32),
                "durations": durations.astype(np.int64),
                "pitch": (rng.standard_normal(n) * (rng.random(n) > 0.2)).astype(np.float32),
            }
        )
    return data.collate(items)
