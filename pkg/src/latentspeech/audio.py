"""Signal-level feature extraction and inversion.

Everything here is plain numpy and deterministic: log-mel analysis, an
autocorrelation pitch tracker, iterative phase-retrieval inversion for
audible debugging, and 16-bit WAV I/O. Framing is shared between mel,
pitch, and energy so frame counts always line up.
"""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .config import TrainingConfig
from .errors import AudioError


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)

    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for i in range(n_mels):
        left, center, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (fft_freqs - left) / max(center - left, 1e-10)
        down = (right - fft_freqs) / max(right - center, 1e-10)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(config: TrainingConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    mel_points = np.linspace(hz_to_mel(config.mel_fmin), hz_to_mel(config.mel_fmax), config.n_mels + 2)
    return mel_to_hz(mel_points)[1:-1]


def frame_count(n_samples: int, hop_length: int) -> int:
    """Frames produced by center-padded analysis: 1 + n_samples // hop."""
    return 1 + n_samples // hop_length


def frame_signal(waveform: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    """Split a waveform into overlapping frames, reflect-padded by win/2.

    Returns an (n_frames, win_length) matrix; n_frames follows
    ``frame_count``.
    """
    pad = win_length // 2
    x = np.pad(np.asarray(waveform, dtype=np.float64), pad, mode="reflect")
    n_frames = frame_count(len(waveform), hop_length)
    idx = np.arange(win_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    return x[idx]


def _check_waveform(waveform: np.ndarray, config: TrainingConfig) -> np.ndarray:
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise AudioError(f"expected mono waveform, got shape {waveform.shape}")
    if len(waveform) < config.win_length:
        raise AudioError(
            f"waveform has {len(waveform)} samples, shorter than one window ({config.win_length})"
        )
    return waveform.astype(np.float64)


def stft_magnitude(waveform: np.ndarray, config: TrainingConfig) -> np.ndarray:
    """Magnitude spectrogram, shape (n_frames, n_fft // 2 + 1)."""
    frames = frame_signal(waveform, config.win_length, config.hop_length)
    window = np.hanning(config.win_length)
    return np.abs(np.fft.rfft(frames * window, n=config.n_fft, axis=1))


def extract_mel(waveform: np.ndarray, config: TrainingConfig) -> np.ndarray:
    """Log-amplitude mel spectrogram, shape (n_frames, n_mels).

    Linear mel energy is clamped at ``config.mel_floor`` before the log, so
    silence maps to the constant log(mel_floor).
    """
    waveform = _check_waveform(waveform, config)
    mag = stft_magnitude(waveform, config)
    fb = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.mel_fmin, config.mel_fmax)
    mel = mag @ fb.T
    return np.log(np.maximum(mel, config.mel_floor)).astype(np.float32)


def frame_rms(waveform: np.ndarray, config: TrainingConfig) -> np.ndarray:
    """Per-frame RMS at the mel frame rate, shape (n_frames,)."""
    frames = frame_signal(waveform, config.win_length, config.hop_length)
    return np.sqrt(np.mean(frames**2, axis=1))


def track_pitch(waveform: np.ndarray, config: TrainingConfig) -> np.ndarray:
    """Frame-level fundamental frequency in Hz; 0 marks unvoiced frames.

    Normalized autocorrelation per frame with a peak search restricted to
    [pitch_fmin, pitch_fmax]. A frame is voiced when the best peak clears
    ``voicing_threshold`` and the frame is not near-silent. The lag of the
    winning peak is refined by parabolic interpolation.
    """
    waveform = _check_waveform(waveform, config)
    frames = frame_signal(waveform, config.win_length, config.hop_length)
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = max(2, int(np.floor(config.sample_rate / config.pitch_fmax)))
    lag_max = min(config.win_length - 2, int(np.ceil(config.sample_rate / config.pitch_fmin)))

    # full autocorrelation via FFT, one batch for all frames
    n_fft = int(2 ** np.ceil(np.log2(2 * config.win_length)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acorr = np.fft.irfft(spec * np.conj(spec), n=n_fft, axis=1)[:, : config.win_length]

    energy = acorr[:, 0]
    silent = energy < 1e-8
    norm = np.where(silent, 1.0, energy)
    acorr = acorr / norm[:, None]

    search = acorr[:, lag_min : lag_max + 1]
    best = np.argmax(search, axis=1)
    peak = search[np.arange(len(frames)), best]

    f0 = np.zeros(len(frames), dtype=np.float64)
    voiced = (~silent) & (peak > config.voicing_threshold)
    for i in np.nonzero(voiced)[0]:
        lag = lag_min + best[i]
        if 0 < lag < config.win_length - 1:
            y0, y1, y2 = acorr[i, lag - 1], acorr[i, lag], acorr[i, lag + 1]
            denom = y0 - 2.0 * y1 + y2
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (y0 - y2) / denom
        f0[i] = config.sample_rate / lag
    return f0.astype(np.float32)


def _istft(spec: np.ndarray, config: TrainingConfig) -> np.ndarray:
    """Overlap-add inverse of ``stft_magnitude`` framing, trimmed of padding."""
    n_frames = spec.shape[0]
    window = np.hanning(config.win_length)
    frames = np.fft.irfft(spec, n=config.n_fft, axis=1)[:, : config.win_length]
    length = (n_frames - 1) * config.hop_length + config.win_length
    out = np.zeros(length)
    wsum = np.zeros(length)
    for i in range(n_frames):
        start = i * config.hop_length
        out[start : start + config.win_length] += frames[i] * window
        wsum[start : start + config.win_length] += window**2
    out = out / np.maximum(wsum, 1e-10)
    pad = config.win_length // 2
    return out[pad : length - pad]


def invert_mel(mel: np.ndarray, config: TrainingConfig, iterations: int = 60) -> np.ndarray:
    """Reconstruct a debug-quality waveform from a log-mel spectrogram.

    Pseudo-inverts the filterbank to a magnitude spectrogram, then runs
    iterative phase retrieval (alternating STFT projections). With
    ``iterations=0`` the zero-phase reconstruction is returned. Output
    length is (n_frames - 1) * hop samples.
    """
    mel = np.asarray(mel, dtype=np.float64)
    fb = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.mel_fmin, config.mel_fmax)
    mag = np.maximum(np.exp(mel) @ np.linalg.pinv(fb).T, 0.0)

    window = np.hanning(config.win_length)

    def forward(x):
        frames = frame_signal(x, config.win_length, config.hop_length)[: mag.shape[0]]
        return np.fft.rfft(frames * window, n=config.n_fft, axis=1)

    target_len = (mag.shape[0] - 1) * config.hop_length
    wave = _istft(mag.astype(complex), config)[:target_len]
    for _ in range(iterations):
        padded = np.pad(wave, (0, max(0, target_len - len(wave))))
        phase = np.angle(forward(padded))
        wave = _istft(mag * np.exp(1j * phase), config)[:target_len]

    peak = np.max(np.abs(wave)) if len(wave) else 0.0
    if peak > 1.0:
        wave = wave / peak
    return wave.astype(np.float32)


def load_wav(path, expected_rate: int) -> np.ndarray:
    """Read a mono PCM WAV as float32 in [-1, 1]; rejects rate/channel mismatch."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, FileNotFoundError) as exc:
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc
    if rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} != expected {expected_rate}")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        return (data / 32767.0).astype(np.float32)
    if data.dtype == np.int32:
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise AudioError(f"{path}: unsupported sample format {data.dtype}")


def save_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write float waveform as 16-bit PCM."""
    clipped = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, (clipped * 32767.0).astype(np.int16))
