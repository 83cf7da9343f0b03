"""Diversity evaluation over synthesized sample batches.

Four prosody features per utterance (length, average energy, average pitch,
within-utterance pitch SD); their sample SDs per sentence, averaged across
sentences, quantify how varied repeated draws are. Histograms of the
per-sample features are exported for visual comparison between models.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio
from .config import TrainingConfig
from .errors import DataError

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("length", "avg_energy", "avg_pitch", "pitch_sd")
HISTOGRAM_FEATURES = ("length", "avg_pitch", "pitch_sd")
ENERGY_DB_EPS = 1e-9

# Reference diversity values from full-scale training runs, shown next to
# measured stats for orientation. Desk-scale runs are not expected to match
# them and nothing asserts against them.
REFERENCE_STATS = {
    "gvae": {"sigma_l": 0.31, "sigma_e": 0.75, "sigma_p": 10.54, "sigma_sigma_p": 8.78},
    "lvae": {"sigma_l": 0.13, "sigma_e": 0.84, "sigma_p": 21.48, "sigma_sigma_p": 9.41},
    "himuv": {"sigma_l": 0.50, "sigma_e": 1.02, "sigma_p": 12.01, "sigma_sigma_p": 10.44},
    "himuv_global_only": {"sigma_l": 0.33, "sigma_e": 0.86, "sigma_p": 11.82, "sigma_sigma_p": 10.39},
    "himuv_local_only": {"sigma_l": 0.36, "sigma_e": 0.71, "sigma_p": 2.46, "sigma_sigma_p": 5.37},
}


@dataclass
class UtteranceFeatures:
    """Per-utterance prosody summary; pitch fields are None when fully unvoiced."""

    length: float
    avg_energy: float
    avg_pitch: float | None
    pitch_sd: float | None

    @property
    def voiced(self) -> bool:
        return self.avg_pitch is not None

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def waveform_features(waveform: np.ndarray, config: TrainingConfig) -> UtteranceFeatures:
    """Length (s), mean frame energy (dB), voiced-only pitch mean and SD (Hz)."""
    waveform = np.asarray(waveform)
    length = len(waveform) / config.sample_rate
    rms = audio.frame_rms(waveform, config)
    avg_energy = float(np.mean(20.0 * np.log10(rms + ENERGY_DB_EPS)))
    f0 = audio.track_pitch(waveform, config)
    voiced = f0[f0 > 0]
    if voiced.size == 0:
        return UtteranceFeatures(length, avg_energy, None, None)
    # a single voiced frame shows no spread, so its SD is 0 rather than undefined
    pitch_sd = float(np.std(voiced, ddof=1)) if voiced.size > 1 else 0.0
    return UtteranceFeatures(length, avg_energy, float(np.mean(voiced)), pitch_sd)


def mel_features(
    mel: np.ndarray, config: TrainingConfig, iterations: int = 30
) -> UtteranceFeatures:
    """Features for a log-mel sample, via deterministic inversion to a waveform.

    Keeps one feature definition for both input kinds; the inverted length is
    (n_frames - 1) * hop samples, so mel- and WAV-born lengths agree.
    """
    return waveform_features(audio.invert_mel(mel, config, iterations=iterations), config)


@dataclass
class DiversityStats:
    """Per-sentence sample SDs of the four features, averaged across sentences.

    sigma_p / sigma_sigma_p are None when no sentence had two voiced samples.
    """

    sigma_l: float
    sigma_e: float
    sigma_p: float | None
    sigma_sigma_p: float | None
    n_samples: int
    per_sentence: list[dict]
    unvoiced_samples: int = 0
    excluded_sentences: int = 0

    def to_dict(self) -> dict:
        return {
            "sigma_l": self.sigma_l,
            "sigma_e": self.sigma_e,
            "sigma_p": self.sigma_p,
            "sigma_sigma_p": self.sigma_sigma_p,
            "n_samples": self.n_samples,
            "per_sentence": self.per_sentence,
            "unvoiced_samples": self.unvoiced_samples,
            "excluded_sentences": self.excluded_sentences,
        }


def _sample_sd(values: list[float]) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def diversity_stats(samples: dict[str, list[UtteranceFeatures]]) -> DiversityStats:
    """Spread of repeated draws: sample SD (ddof=1) per sentence, then the
    unweighted mean across sentences.

    Sentences with fewer than two samples are excluded with a warning; pitch
    SDs additionally need two voiced samples. Raises when nothing is usable.
    """
    per_sentence = []
    n_samples = 0
    unvoiced = 0
    excluded = 0
    for sentence in sorted(samples):
        feats = samples[sentence]
        unvoiced += sum(1 for f in feats if not f.voiced)
        if len(feats) < 2:
            logger.warning(
                "sentence %s has %d sample(s), need at least 2; excluded", sentence, len(feats)
            )
            excluded += 1
            continue
        voiced = [f for f in feats if f.voiced]
        row = {
            "sentence": sentence,
            "n_samples": len(feats),
            "n_voiced": len(voiced),
            "sigma_l": _sample_sd([f.length for f in feats]),
            "sigma_e": _sample_sd([f.avg_energy for f in feats]),
            "sigma_p": None,
            "sigma_sigma_p": None,
        }
        if len(voiced) >= 2:
            row["sigma_p"] = _sample_sd([f.avg_pitch for f in voiced])
            row["sigma_sigma_p"] = _sample_sd([f.pitch_sd for f in voiced])
        else:
            logger.warning(
                "sentence %s has %d voiced sample(s); pitch SDs undefined", sentence, len(voiced)
            )
        per_sentence.append(row)
        n_samples += len(feats)
    if not per_sentence:
        raise DataError("no sentence has at least 2 samples; nothing to evaluate")

    def mean_of(key: str) -> float | None:
        values = [row[key] for row in per_sentence if row[key] is not None]
        return float(np.mean(values)) if values else None

    return DiversityStats(
        sigma_l=mean_of("sigma_l"),
        sigma_e=mean_of("sigma_e"),
        sigma_p=mean_of("sigma_p"),
        sigma_sigma_p=mean_of("sigma_sigma_p"),
        n_samples=n_samples,
        per_sentence=per_sentence,
        unvoiced_samples=unvoiced,
        excluded_sentences=excluded,
    )


def export_histograms(
    features_by_label: dict[str, list[UtteranceFeatures]],
    out_dir: str | Path,
    n_bins: int = 20,
) -> list[Path]:
    """One histogram (PNG + CSV of bin edges/counts) per feature per label.

    Bin edges are shared across labels per feature so the plots compare
    directly. Pitch features skip unvoiced samples.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not features_by_label or all(not v for v in features_by_label.values()):
        raise DataError("no features to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for feature in HISTOGRAM_FEATURES:
        pooled = [
            f.get(feature)
            for feats in features_by_label.values()
            for f in feats
            if f.get(feature) is not None
        ]
        if not pooled:
            logger.warning("feature %s has no defined values; histogram skipped", feature)
            continue
        edges = np.histogram_bin_edges(pooled, bins=n_bins)
        for label in sorted(features_by_label):
            values = [f.get(feature) for f in features_by_label[label] if f.get(feature) is not None]
            counts, _ = np.histogram(values, bins=edges)

            csv_path = out_dir / f"{label}_{feature}.csv"
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_left", "bin_right", "count"])
                for i, count in enumerate(counts):
                    writer.writerow([repr(edges[i]), repr(edges[i + 1]), int(count)])

            fig, ax = plt.subplots(figsize=(5, 3))
            ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
            ax.set_title(f"{label}: {feature}")
            ax.set_xlabel(feature)
            ax.set_ylabel("count")
            png_path = out_dir / f"{label}_{feature}.png"
            fig.tight_layout()
            fig.savefig(png_path)
            plt.close(fig)
            written.extend([csv_path, png_path])
    return written


def _sample_files(sample_dir: Path) -> list[Path]:
    """Sample artifacts in one sentence directory; a WAV shadows its mel twin."""
    files = {}
    for path in sorted(sample_dir.iterdir()):
        if path.suffix == ".wav":
            files[path.stem] = path
        elif path.name.endswith("_mel.npy"):
            files.setdefault(path.name[: -len("_mel.npy")], path)
    return [files[stem] for stem in sorted(files)]


def collect_sample_features(
    samples_dir: str | Path,
    config: TrainingConfig,
    mel_iterations: int = 30,
) -> dict[str, dict[str, list[UtteranceFeatures]]]:
    """Walk `<label>/<sentence>/<sample>` and compute features for every sample."""
    samples_dir = Path(samples_dir)
    if not samples_dir.is_dir():
        raise DataError(f"samples directory not found: {samples_dir}")
    collected: dict[str, dict[str, list[UtteranceFeatures]]] = {}
    for label_dir in sorted(p for p in samples_dir.iterdir() if p.is_dir()):
        sentences: dict[str, list[UtteranceFeatures]] = {}
        for sentence_dir in sorted(p for p in label_dir.iterdir() if p.is_dir()):
            feats = []
            for path in _sample_files(sentence_dir):
                if path.suffix == ".wav":
                    feats.append(
                        waveform_features(audio.load_wav(path, config.sample_rate), config)
                    )
                else:
                    feats.append(mel_features(np.load(path), config, iterations=mel_iterations))
            if feats:
                sentences[sentence_dir.name] = feats
        if sentences:
            collected[label_dir.name] = sentences
    if not collected:
        raise DataError(f"no samples found under {samples_dir} (expected label/sentence/sample)")
    return collected


def evaluate_directory(
    samples_dir: str | Path,
    out_dir: str | Path,
    config: TrainingConfig,
    n_bins: int = 20,
    mel_iterations: int = 30,
    transcripts: dict | None = None,
) -> dict:
    """Full evaluation: features -> per-label stats + histograms + stats.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collected = collect_sample_features(samples_dir, config, mel_iterations=mel_iterations)
    report = {
        "metadata": {
            "sd_definition": "sample SD (ddof=1) per sentence, unweighted mean across sentences",
            "energy_definition": "mean over frames of 20*log10(frame RMS + 1e-9), hop-rate frames",
            "histogram_binning": "shared bin edges per feature across labels",
            "reference_note": "reference values are full-scale results shown for orientation only",
        },
        "models": {},
        "reference": REFERENCE_STATS,
    }
    if transcripts is not None:
        report["metadata"]["transcripts"] = transcripts
    for label, sentences in collected.items():
        report["models"][label] = diversity_stats(sentences).to_dict()
    export_histograms(
        {label: [f for feats in sentences.values() for f in feats]
         for label, sentences in collected.items()},
        out_dir,
        n_bins=n_bins,
    )
    stats_path = out_dir / "stats.json"
    stats_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
