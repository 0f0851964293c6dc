"""Spectral front end: Hann STFT, log-magnitude and Welch PSD.

All functions are pure and operate on float64 numpy arrays shaped
``(channels, samples)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SAMPLE_RATE

MAG_FLOOR = 1e-10

STFT_WIN = 512
STFT_HOP = 128
STFT_FFT = 512

WELCH_WIN = 256
WELCH_OVERLAP = 128
WELCH_FFT = 256


@dataclass(frozen=True)
class Waveform:
    """Binaural time-domain signal, ``samples`` has shape (2, n)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"waveform must have shape (2, n), got {s.shape}")
        if s.shape[1] < 512:
            raise ValueError(f"waveform needs at least 512 samples, got {s.shape[1]}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return 2

    def __len__(self) -> int:
        return self.samples.shape[1]


def _as_samples(w) -> tuple[np.ndarray, int]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    s = np.asarray(w, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    return s, SAMPLE_RATE


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann window, ``0.5 * (1 - cos(2 pi i / (n - 1)))``."""
    if n < 2:
        raise ValueError(f"hann window length must be >= 2, got {n}")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n - 1)))


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    # x: (channels, n) -> (channels, frames, win); trailing partial frame dropped
    n = x.shape[-1]
    count = (n - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(count)[:, None]
    return x[..., idx]


def stft(w, win: int = STFT_WIN, hop: int = STFT_HOP, fft: int = STFT_FFT) -> np.ndarray:
    """One-sided complex STFT, shape (channels, frames, fft // 2 + 1)."""
    x, _ = _as_samples(w)
    if win > fft:
        raise ValueError(f"window {win} longer than fft size {fft}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if x.shape[-1] < win:
        raise ValueError(f"signal length {x.shape[-1]} shorter than window {win}")
    frames = _frames(x, win, hop) * hann_window(win)
    return np.fft.rfft(frames, n=fft, axis=-1)


def log_magnitude(spec: np.ndarray) -> np.ndarray:
    """Natural log of the magnitude, floored at ``MAG_FLOOR``."""
    return np.log(np.maximum(np.abs(spec), MAG_FLOOR))


def log_stft(w) -> np.ndarray:
    return log_magnitude(stft(w))


def psd_scale(win: int = WELCH_WIN, sample_rate: int = SAMPLE_RATE) -> float:
    w = hann_window(win)
    return 1.0 / (sample_rate * np.sum(w * w))


def one_sided_weights(fft: int) -> np.ndarray:
    """Bin weights doubling everything except DC (and Nyquist for even fft)."""
    wts = np.full(fft // 2 + 1, 2.0)
    wts[0] = 1.0
    if fft % 2 == 0:
        wts[-1] = 1.0
    return wts


def welch_psd(
    w,
    win: int = WELCH_WIN,
    overlap: int = WELCH_OVERLAP,
    fft: int = WELCH_FFT,
    sample_rate: int | None = None,
) -> np.ndarray:
    """Welch power spectral density per channel, shape (channels, fft // 2 + 1).

    Segments of ``win`` samples advance by ``win - overlap``; each is
    Hann-windowed and its squared magnitude scaled by
    ``1 / (sample_rate * sum(w**2))``. One-sided bins are doubled except
    DC and Nyquist, then segments are averaged.
    """
    x, sr = _as_samples(w)
    if sample_rate is not None:
        sr = sample_rate
    if x.shape[-1] < win:
        raise ValueError(f"signal length {x.shape[-1]} shorter than window {win}")
    if not 0 <= overlap < win:
        raise ValueError(f"overlap must be in [0, {win}), got {overlap}")
    spec = np.fft.rfft(_frames(x, win, win - overlap) * hann_window(win), n=fft, axis=-1)
    power = (spec.real**2 + spec.imag**2).mean(axis=-2)
    return power * psd_scale(win, sr) * one_sided_weights(fft)


def psd_vector(w) -> np.ndarray:
    """Flattened two-channel PSD (d = 258 with default parameters)."""
    return welch_psd(w).reshape(-1)


def log_psd(w, eps: float = 1e-10) -> np.ndarray:
    """Log-domain PSD target, ``ln(psd + eps)``, flattened."""
    return np.log(psd_vector(w) + eps)


def read_pcm16(path: str | Path, channels: int = 2, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read interleaved 16-bit little-endian PCM into a waveform."""
    raw = np.fromfile(path, dtype="<i2")
    if raw.size % channels:
        raise ValueError(f"{path}: sample count {raw.size} not divisible by {channels}")
    return Waveform(pcm16_to_float(raw.reshape(-1, channels).T), sample_rate)


def write_pcm16(path: str | Path, w: Waveform) -> None:
    Path(path).write_bytes(float_to_pcm16(w.samples).T.tobytes())


def float_to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32767.0), -32768, 32767).astype("<i2")


def pcm16_to_float(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 32767.0
