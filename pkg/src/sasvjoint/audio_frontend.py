"""Waveform utilities and the log Mel filterbank used by the ASV encoder."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 64
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-6
CM_INPUT_SAMPLES = 64600


class FrontendError(ValueError):
    pass


def preemphasis(x, coeff: float = PREEMPHASIS) -> np.ndarray:
    if not 0 <= coeff < 1:
        raise FrontendError(f"pre-emphasis coefficient must be in [0, 1), got {coeff}")
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[..., 1:] -= coeff * x[..., :-1]
    return y


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - lo) / (mid - lo)
    down = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.flags.writeable = False
    return fb


def n_frames(n_samples: int) -> int:
    return 1 + (n_samples - FRAME_LENGTH) // FRAME_SHIFT


def log_mel_features(x, coeff: float = PREEMPHASIS) -> np.ndarray:
    """Pre-emphasis, 25 ms Hamming frames every 10 ms, 512-point power
    spectrum, 64 Mel bands over 0-8 kHz, natural log with a 1e-6 floor.

    Returns ``(frames, 64)`` float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise FrontendError("expected a 1-D waveform")
    if x.size < FRAME_LENGTH:
        raise FrontendError(f"waveform has {x.size} samples, need at least {FRAME_LENGTH}")
    y = preemphasis(x, coeff)
    frames = np.lib.stride_tricks.sliding_window_view(y, FRAME_LENGTH)[::FRAME_SHIFT]
    spec = np.fft.rfft(frames * np.hamming(FRAME_LENGTH), n=N_FFT)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ mel_filterbank().T + LOG_FLOOR)


def pad_or_crop(x, n_samples: int) -> np.ndarray:
    """First ``n_samples`` of ``x``, tiling short inputs."""
    if n_samples < 1:
        raise FrontendError("n_samples must be >= 1")
    x = np.asarray(x)
    if x.size >= n_samples:
        return x[:n_samples].copy()
    reps = -(-n_samples // x.size)
    return np.tile(x, reps)[:n_samples]


def random_crop(x, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed window of ``n_samples``; short inputs are tiled first."""
    if n_samples < 1:
        raise FrontendError("n_samples must be >= 1")
    x = np.asarray(x)
    if x.size <= n_samples:
        return pad_or_crop(x, n_samples)
    start = int(rng.integers(0, x.size - n_samples + 1))
    return x[start:start + n_samples].copy()


def concat_enrolment(utterances, cap_seconds: float) -> np.ndarray:
    """Concatenate in order, then truncate or tile to exactly ``cap_seconds``."""
    if len(utterances) == 0:
        raise FrontendError("no enrolment utterances")
    if cap_seconds <= 0:
        raise FrontendError("cap_seconds must be > 0")
    cap = int(round(cap_seconds * SAMPLE_RATE))
    return pad_or_crop(np.concatenate([np.asarray(u) for u in utterances]), cap)


def read_wav(path) -> np.ndarray:
    sr, data = wavfile.read(Path(path))
    if sr != SAMPLE_RATE:
        raise FrontendError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise FrontendError(f"{path}: expected mono audio")
    if data.dtype != np.int16:
        raise FrontendError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float32) / 32768.0


def write_wav(path, x) -> None:
    pcm = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767)
    wavfile.write(Path(path), SAMPLE_RATE, pcm.astype("<i2"))
