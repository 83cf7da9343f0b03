"""Corpus ingestion: manifests, alignments, feature cache, and batching.

Preprocessing turns a manifest of (audio, phoneme string) pairs plus
per-utterance alignment files into a flat cache of numpy arrays and a
stats file. Training never touches audio again; it reads the cache
through CorpusCache and batches with BatchIterator.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import audio
from .config import TrainingConfig
from .errors import DataError, VocabularyError

logger = logging.getLogger(__name__)

PAD_ID = 0

STATS_FILENAME = "stats.json"
CACHE_FORMAT = 1


def parse_manifest(path: str | Path) -> list[tuple[Path, list[str]]]:
    """Read `audio_path|PH1 PH2 ...` lines; audio paths resolve relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "|" not in line:
            raise DataError(f"{path}:{lineno}: expected 'audio_path|phonemes', got {line!r}")
        audio_rel, _, phoneme_str = line.partition("|")
        symbols = phoneme_str.split()
        if not symbols:
            raise DataError(f"{path}:{lineno}: empty phoneme string")
        entries.append((root / audio_rel.strip(), symbols))
    if not entries:
        raise DataError(f"manifest is empty: {path}")
    return entries


def build_vocabulary(entries: list[tuple[Path, list[str]]]) -> dict[str, int]:
    """Symbol table over the manifest; id 0 is reserved for padding."""
    symbols = sorted({s for _, syms in entries for s in syms})
    return {s: i + 1 for i, s in enumerate(symbols)}


def encode_phonemes(symbols: list[str], vocab: dict[str, int]) -> np.ndarray:
    ids = np.empty(len(symbols), dtype=np.int64)
    for i, s in enumerate(symbols):
        if s not in vocab:
            raise VocabularyError(f"phoneme symbol {s!r} not in vocabulary")
        ids[i] = vocab[s]
    return ids


def load_alignment(path: str | Path, expected_count: int | None = None) -> np.ndarray:
    """Read one line of space-separated frame counts, one per phoneme."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"alignment file not found: {path}")
    text = path.read_text(encoding="utf-8").strip()
    try:
        values = [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise DataError(f"{path}: malformed duration entry: {exc}") from exc
    if not values:
        raise DataError(f"{path}: empty alignment file")
    if any(v < 0 for v in values):
        raise DataError(f"{path}: negative duration")
    if expected_count is not None and len(values) != expected_count:
        raise DataError(
            f"{path}: {len(values)} durations but {expected_count} phonemes in manifest"
        )
    return np.asarray(values, dtype=np.int64)


def load_frame_pitch(path: str | Path, expected_frames: int) -> np.ndarray:
    """Read a precomputed frame pitch track, one Hz value per line (0 = unvoiced)."""
    path = Path(path)
    try:
        values = np.asarray(
            [float(tok) for tok in path.read_text(encoding="utf-8").split()],
            dtype=np.float32,
        )
    except ValueError as exc:
        raise DataError(f"{path}: malformed pitch entry: {exc}") from exc
    if len(values) != expected_frames:
        raise DataError(f"{path}: {len(values)} pitch frames, expected {expected_frames}")
    if np.any(values < 0):
        raise DataError(f"{path}: negative pitch value")
    return values


def average_pitch_by_phoneme(frame_pitch: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Mean of voiced frame pitch inside each phoneme span; 0 if none voiced.

    Zero frames mark unvoiced and are excluded from the mean.
    """
    frame_pitch = np.asarray(frame_pitch, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if int(durations.sum()) != len(frame_pitch):
        raise DataError(
            f"duration sum {int(durations.sum())} != pitch track length {len(frame_pitch)}"
        )
    out = np.zeros(len(durations), dtype=np.float32)
    start = 0
    for i, d in enumerate(durations):
        span = frame_pitch[start : start + d]
        voiced = span[span > 0]
        if len(voiced):
            out[i] = voiced.mean()
        start += d
    return out


def extract_phoneme_pitch(
    waveform: np.ndarray, durations: np.ndarray, config: TrainingConfig
) -> np.ndarray:
    """Track frame pitch, then average voiced frames per phoneme span."""
    return average_pitch_by_phoneme(audio.track_pitch(waveform, config), durations)


def reconcile_lengths(
    mel: np.ndarray, frame_pitch: np.ndarray, durations: np.ndarray, mel_floor: float
) -> tuple[np.ndarray, np.ndarray]:
    """Force mel/pitch frame counts to sum(durations).

    Forced aligners round boundaries, so off-by-a-couple is normal: clip or
    pad (mel at the log floor, pitch as unvoiced). Gaps over 2 frames mean
    the alignment is wrong for this audio.
    """
    target = int(durations.sum())
    if target <= 0:
        raise DataError("alignment has zero total duration")
    gap = target - mel.shape[0]
    if abs(gap) > 2:
        raise DataError(
            f"duration sum {target} vs {mel.shape[0]} mel frames: gap {abs(gap)} > 2"
        )
    if gap > 0:
        pad_rows = np.full((gap, mel.shape[1]), np.log(mel_floor), dtype=mel.dtype)
        mel = np.concatenate([mel, pad_rows], axis=0)
        frame_pitch = np.concatenate([frame_pitch, np.zeros(gap, dtype=frame_pitch.dtype)])
    elif gap < 0:
        mel = mel[:target]
        frame_pitch = frame_pitch[:target]
    return mel, frame_pitch


def compute_pitch_stats(pitch_vectors: list[np.ndarray]) -> tuple[float, float]:
    """Corpus mean/SD of phoneme pitch over voiced phonemes only."""
    voiced = np.concatenate([p[p > 0] for p in pitch_vectors]) if pitch_vectors else np.array([])
    if len(voiced) == 0:
        return 0.0, 0.0
    return float(voiced.mean()), float(voiced.std())


def _cache_paths(out_dir: Path, stem: str) -> dict[str, Path]:
    return {
        "phonemes": out_dir / f"{stem}_phonemes.npy",
        "mel": out_dir / f"{stem}_mel.npy",
        "durations": out_dir / f"{stem}_durations.npy",
        "pitch": out_dir / f"{stem}_pitch.npy",
    }


def preprocess_corpus(
    manifest_path: str | Path, out_dir: str | Path, config: TrainingConfig
) -> dict:
    """Extract features for every manifest entry and write the cache.

    Expects `<stem>.dur` alignment files next to the audio; an optional
    `<stem>.f0` file overrides the built-in pitch tracker. Utterances that
    fail extraction are skipped with a logged reason. Existing per-utterance
    files are reused, so an interrupted run resumes where it stopped.
    """
    entries = parse_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary(entries)

    stems: list[str] = []
    skipped: dict[str, str] = {}
    pitch_vectors: list[np.ndarray] = []
    for audio_path, symbols in entries:
        stem = audio_path.stem
        paths = _cache_paths(out_dir, stem)
        try:
            if all(p.is_file() for p in paths.values()):
                pitch = np.load(paths["pitch"])
            else:
                pitch = _extract_one(audio_path, symbols, vocab, paths, config)
        except Exception as exc:
            logger.warning("skipping %s: %s", stem, exc)
            skipped[stem] = str(exc)
            continue
        stems.append(stem)
        pitch_vectors.append(pitch)

    if not stems:
        raise DataError(f"no usable utterances in {manifest_path}")

    pitch_mean, pitch_sd = compute_pitch_stats(pitch_vectors)
    normalize = pitch_sd > 0.0
    if not normalize:
        logger.warning("corpus pitch SD is 0; pitch normalization disabled")

    stats = {
        "cache_format": CACHE_FORMAT,
        "mel_config": {
            "sample_rate": config.sample_rate,
            "n_fft": config.n_fft,
            "win_length": config.win_length,
            "hop_length": config.hop_length,
            "n_mels": config.n_mels,
            "mel_fmin": config.mel_fmin,
            "mel_fmax": config.mel_fmax,
            "mel_floor": config.mel_floor,
        },
        "normalize_pitch": normalize,
        "pitch_mean": pitch_mean,
        "pitch_sd": pitch_sd,
        "skipped": skipped,
        "utterances": stems,
        "vocab": vocab,
    }
    stats_path = out_dir / STATS_FILENAME
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(
        "cached %d utterances (%d skipped) to %s", len(stems), len(skipped), out_dir
    )
    return stats


def _extract_one(
    audio_path: Path,
    symbols: list[str],
    vocab: dict[str, int],
    paths: dict[str, Path],
    config: TrainingConfig,
) -> np.ndarray:
    waveform = audio.load_wav(audio_path, config.sample_rate)
    durations = load_alignment(audio_path.with_suffix(".dur"), expected_count=len(symbols))
    mel = audio.extract_mel(waveform, config)

    f0_path = audio_path.with_suffix(".f0")
    if f0_path.is_file():
        frame_pitch = load_frame_pitch(f0_path, mel.shape[0])
    else:
        frame_pitch = audio.track_pitch(waveform, config)

    mel, frame_pitch = reconcile_lengths(mel, frame_pitch, durations, config.mel_floor)
    pitch = average_pitch_by_phoneme(frame_pitch, durations)
    phonemes = encode_phonemes(symbols, vocab)

    np.save(paths["phonemes"], phonemes)
    np.save(paths["mel"], mel)
    np.save(paths["durations"], durations)
    np.save(paths["pitch"], pitch)
    return pitch


class CorpusCache:
    """Read-side view of a preprocessed corpus.

    Applies pitch normalization (voiced phonemes only, unvoiced stay 0) when
    the stats file enables it, and checks the duration/mel contract on every
    load.
    """

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        stats_path = self.cache_dir / STATS_FILENAME
        if not stats_path.is_file():
            raise DataError(f"no {STATS_FILENAME} in {self.cache_dir}; run preprocessing first")
        self.stats = json.loads(stats_path.read_text(encoding="utf-8"))
        if self.stats.get("cache_format") != CACHE_FORMAT:
            raise DataError(
                f"cache format {self.stats.get('cache_format')} != supported {CACHE_FORMAT}"
            )
        self.vocab: dict[str, int] = self.stats["vocab"]
        self.stems: list[str] = self.stats["utterances"]
        self.pitch_mean: float = self.stats["pitch_mean"]
        self.pitch_sd: float = self.stats["pitch_sd"]
        self.normalize_pitch: bool = self.stats["normalize_pitch"]
        if not self.stems:
            raise DataError(f"cache at {self.cache_dir} lists no utterances")

    def __len__(self) -> int:
        return len(self.stems)

    @property
    def n_symbols(self) -> int:
        # embedding table size: padding id plus the vocabulary
        return len(self.vocab) + 1

    def normalize(self, pitch: np.ndarray) -> np.ndarray:
        if not self.normalize_pitch:
            return pitch
        out = np.where(pitch > 0, (pitch - self.pitch_mean) / self.pitch_sd, 0.0)
        return out.astype(np.float32)

    def denormalize(self, pitch: np.ndarray, voiced_mask: np.ndarray | None = None) -> np.ndarray:
        """Back to Hz. Needs an explicit voiced mask since normalized values can be negative."""
        if not self.normalize_pitch:
            return pitch
        hz = pitch * self.pitch_sd + self.pitch_mean
        if voiced_mask is not None:
            hz = np.where(voiced_mask, hz, 0.0)
        return hz.astype(np.float32)

    def load(self, index: int) -> dict:
        stem = self.stems[index]
        paths = _cache_paths(self.cache_dir, stem)
        try:
            phonemes = np.load(paths["phonemes"])
            mel = np.load(paths["mel"])
            durations = np.load(paths["durations"])
            pitch = np.load(paths["pitch"])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load cached utterance {stem}: {exc}") from exc
        if int(durations.sum()) != mel.shape[0]:
            raise DataError(
                f"{stem}: duration sum {int(durations.sum())} != mel frames {mel.shape[0]}"
            )
        if len(phonemes) != len(durations) or len(pitch) != len(durations):
            raise DataError(f"{stem}: phoneme/duration/pitch length mismatch")
        return {
            "stem": stem,
            "phonemes": phonemes,
            "mel": mel,
            "durations": durations,
            "pitch": self.normalize(pitch),
        }


def collate(items: list[dict]) -> dict[str, torch.Tensor]:
    """Pad a list of utterances into batch tensors with explicit masks.

    Text-axis tensors pad with 0 (the PAD id / zero duration / unvoiced
    pitch); mel pads with 0 and is always consumed through `mel_mask`.
    """
    n_max = max(len(it["phonemes"]) for it in items)
    m_max = max(it["mel"].shape[0] for it in items)
    n_mels = items[0]["mel"].shape[1]
    batch = len(items)

    phonemes = torch.zeros(batch, n_max, dtype=torch.int64)
    durations = torch.zeros(batch, n_max, dtype=torch.int64)
    pitch = torch.zeros(batch, n_max, dtype=torch.float32)
    text_mask = torch.zeros(batch, n_max, dtype=torch.bool)
    mel = torch.zeros(batch, m_max, n_mels, dtype=torch.float32)
    mel_mask = torch.zeros(batch, m_max, dtype=torch.bool)

    for b, it in enumerate(items):
        n = len(it["phonemes"])
        m = it["mel"].shape[0]
        phonemes[b, :n] = torch.from_numpy(np.ascontiguousarray(it["phonemes"]))
        durations[b, :n] = torch.from_numpy(np.ascontiguousarray(it["durations"]))
        pitch[b, :n] = torch.from_numpy(np.ascontiguousarray(it["pitch"]))
        text_mask[b, :n] = True
        mel[b, :m] = torch.from_numpy(np.ascontiguousarray(it["mel"]))
        mel_mask[b, :m] = True

    return {
        "phonemes": phonemes,
        "durations": durations,
        "pitch": pitch,
        "text_mask": text_mask,
        "mel": mel,
        "mel_mask": mel_mask,
        "text_lengths": text_mask.sum(dim=1),
        "mel_lengths": mel_mask.sum(dim=1),
        "stems": [it["stem"] for it in items],
    }


class BatchIterator:
    """Deterministic shuffled batching over a CorpusCache.

    Every epoch reshuffles with a seed derived from (seed, epoch), so the
    batch sequence is a pure function of the config seed. Loading happens
    single-threaded on purpose: reproducibility over throughput.
    """

    def __init__(self, cache: CorpusCache, batch_size: int, seed: int, drop_last: bool = False):
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        self.cache = cache
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.epoch = 0

    def batches_per_epoch(self) -> int:
        n = len(self.cache)
        if self.drop_last:
            return n // self.batch_size
        return (n + self.batch_size - 1) // self.batch_size

    def __iter__(self):
        order = np.random.default_rng((self.seed, self.epoch)).permutation(len(self.cache))
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            yield collate([self.cache.load(int(i)) for i in idx])
        self.epoch += 1

    def batch_at(self, index: int) -> dict:
        """Batch for global step `index`, a pure function of (seed, index).

        Lets a resumed trainer continue mid-epoch without iterator state.
        """
        epoch, pos = divmod(index, self.batches_per_epoch())
        order = np.random.default_rng((self.seed, epoch)).permutation(len(self.cache))
        start = pos * self.batch_size
        idx = order[start : start + self.batch_size]
        return collate([self.cache.load(int(i)) for i in idx])
