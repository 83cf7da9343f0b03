"""Exception types shared across the package.

Each family maps to a distinct CLI exit code (see cli.py), so errors stay
machine-distinguishable end to end.
"""


class LatentSpeechError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentSpeechError):
    """Invalid configuration value or unparseable config file."""


class DataError(LatentSpeechError):
    """Malformed corpus input: manifest, alignment, pitch file, cache."""


class AudioError(LatentSpeechError):
    """Waveform that cannot be processed (wrong rate, too short, not mono)."""


class VocabularyError(LatentSpeechError):
    """Phoneme symbol or id outside the model vocabulary."""


class CheckpointError(LatentSpeechError):
    """Unreadable, corrupt, or version-incompatible checkpoint file."""


class DegenerateOutputError(LatentSpeechError):
    """Synthesis request that would produce empty output."""


class TrainingError(LatentSpeechError):
    """Training aborted; message names the offending loss term."""
