"""Deterministic audio feature extraction.

Framing, STFT, 40-band log-mel energies, mel sub-band envelopes and
mel-cepstral coefficients, all at a fixed 16 kHz / 25 ms / 10 ms frame
grid. Every function is a pure function of its inputs: no dithering, no
pre-emphasis, no hidden state, so identical input bytes produce identical
feature matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy.io import wavfile

from .base import check_finite

SAMPLE_RATE = 16000
WIN_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FFT = 512
N_MELS = 40
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
LOG_FLOOR = 1e-10
LOG_FLOOR_DB = float(np.log(LOG_FLOOR))


class AudioTooShortError(ValueError):
    """Input shorter than one analysis window (400 samples)."""


@dataclass
class Waveform:
    """16 kHz mono audio; samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        check_finite("waveform samples", self.samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LogMelFeatures:
    """T x 40 matrix of ln mel-band energies at 100 frames/s."""

    frames: np.ndarray
    frame_rate: float = 100.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class CepstralFrames:
    """T x K mel-cepstral coefficients, coefficient 0 excluded."""

    frames: np.ndarray


@dataclass
class SubbandEnvelopes:
    """T x B non-negative mel sub-band energies (pre-log)."""

    env: np.ndarray


def num_frames(n_samples: int) -> int:
    """Frame count for an n-sample input: 1 + floor((n - 400) / 160)."""
    if n_samples < WIN_SAMPLES:
        raise AudioTooShortError(
            f"need at least {WIN_SAMPLES} samples (25 ms), got {n_samples}"
        )
    return 1 + (n_samples - WIN_SAMPLES) // HOP_SAMPLES


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> np.ndarray:
    """n_mels + 2 mel-spaced edge frequencies in Hz (left, centers, right)."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> np.ndarray:
    """Triangular area-normalized mel filterbank, shape (n_mels, n_fft//2 + 1).

    Each triangle spans [edge[b], edge[b+2]] with its peak at edge[b+1] and
    is scaled by 2 / (edge[b+2] - edge[b]) so that every filter has unit
    area in Hz.
    """
    edges = mel_band_edges(n_mels, fmin, fmax)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for b in range(n_mels):
        left, center, right = edges[b], edges[b + 1], edges[b + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[b] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (right - left))
    return fb


_window_cache: dict[int, np.ndarray] = {}
_fb_cache: dict[tuple, np.ndarray] = {}


def _hann(n: int) -> np.ndarray:
    if n not in _window_cache:
        # periodic Hann
        _window_cache[n] = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return _window_cache[n]


def _filterbank_cached(n_mels: int) -> np.ndarray:
    key = (n_mels, N_FFT, SAMPLE_RATE, FMIN_HZ, FMAX_HZ)
    if key not in _fb_cache:
        _fb_cache[key] = mel_filterbank(n_mels)
    return _fb_cache[key]


def frame_signal(x: np.ndarray, win: int = WIN_SAMPLES, hop: int = HOP_SAMPLES) -> np.ndarray:
    """Slice x into overlapping frames, shape (T, win)."""
    t = num_frames(len(x))
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return x[idx]


def power_spectrum(w: Waveform) -> np.ndarray:
    """Per-frame power spectrum |FFT|^2, shape (T, 257)."""
    frames = frame_signal(w.samples) * _hann(WIN_SAMPLES)[None, :]
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def mel_energies(w: Waveform, n_mels: int = N_MELS) -> np.ndarray:
    """Per-frame mel-band energies (pre-log), shape (T, n_mels)."""
    return power_spectrum(w) @ _filterbank_cached(n_mels).T


def logmel_features(w: Waveform, n_mels: int = N_MELS) -> LogMelFeatures:
    """40-band log-mel features: ln(max(energy, 1e-10)) per frame and band."""
    e = mel_energies(w, n_mels)
    return LogMelFeatures(frames=np.log(np.maximum(e, LOG_FLOOR)))


def subband_envelopes(w: Waveform) -> SubbandEnvelopes:
    """Mel sub-band energies without the log, same framing as logmel."""
    return SubbandEnvelopes(env=mel_energies(w))


def cepstral_frames(w: Waveform, n_coeffs: int = 13) -> CepstralFrames:
    """Mel-cepstra: orthonormal DCT-II of the log-mel vector, coeffs 1..K.

    Coefficient 0 carries overall gain and is dropped, which makes the
    cepstra invariant to a scalar gain on the waveform.
    """
    if not 1 <= n_coeffs < N_MELS:
        raise ValueError(f"n_coeffs must be in [1, {N_MELS - 1}], got {n_coeffs}")
    logmel = logmel_features(w).frames
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)
    return CepstralFrames(frames=ceps[:, 1:n_coeffs + 1])


def read_wav(path) -> Waveform:
    """Read a 16 kHz mono WAV (16-bit PCM or 32-bit float, little-endian)."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples=samples)


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a waveform as 32-bit float (default) or 16-bit PCM WAV."""
    if fmt == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, w.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
