import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal as ss

from daf import SAMPLE_RATE
from daf.signal import (
    MAG_FLOOR, Waveform, hann_window, log_magnitude, log_psd, log_stft, psd_vector,
    read_pcm16, stft, welch_psd, write_pcm16,
)


def _noise(n=4096, seed=0):
    return np.random.default_rng(seed).standard_normal((2, n))


# ---------------------------------------------------------------- hann

def test_hann_small_cases():
    np.testing.assert_allclose(hann_window(4), [0, 0.75, 0.75, 0], atol=1e-15)
    np.testing.assert_allclose(hann_window(3), [0, 1, 0], atol=1e-15)


def test_hann_matches_direct_cosine_and_scipy():
    w = hann_window(256)
    for i in (127, 128):
        assert abs(w[i] - 0.5 * (1 - math.cos(2 * math.pi * i / 255))) < 1e-12
    np.testing.assert_allclose(w, ss.get_window("hann", 256, fftbins=False), atol=1e-15)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)


def test_hann_rejects_short():
    with pytest.raises(ValueError):
        hann_window(1)


# ---------------------------------------------------------------- stft

def test_stft_zero_input():
    assert not np.any(stft(np.zeros((2, 1024))))


def test_stft_frame_count():
    assert stft(np.zeros((2, 512))).shape == (2, 1, 257)
    n = 44100
    assert stft(np.zeros((2, n))).shape[1] == (n - 512) // 128 + 1


def test_stft_bin_center_sine_peaks_at_bin_4():
    t = np.arange(4096) / SAMPLE_RATE
    x = np.sin(2 * np.pi * 4 * SAMPLE_RATE / 512 * t)
    X = np.abs(stft(np.stack([x, x])))
    assert np.all(X.argmax(axis=-1) == 4)


def test_stft_matches_naive_dft():
    x = _noise(1024)
    X = stft(x)
    k = 3
    seg = x[0, k * 128:k * 128 + 512] * hann_window(512)
    n = np.arange(512)
    for b in (0, 17, 256):
        naive = np.sum(seg * np.exp(-2j * np.pi * b * n / 512))
        assert abs(naive - X[0, k, b]) < 1e-9


def test_stft_errors():
    with pytest.raises(ValueError):
        stft(np.zeros((2, 100)))
    with pytest.raises(ValueError):
        stft(np.zeros((2, 1024)), win=512, fft=256)
    with pytest.raises(ValueError):
        stft(np.zeros((2, 1024)), hop=0)


def test_log_magnitude_examples():
    out = log_magnitude(np.array([1.0, 0.0, math.e, -1j]))
    np.testing.assert_allclose(out, [0.0, math.log(MAG_FLOOR), 1.0, 0.0], atol=1e-15)


def test_log_stft_shape_and_floor():
    S = log_stft(Waveform(np.zeros((2, 2048))))
    assert S.shape[2] == 257
    assert S.min() >= math.log(MAG_FLOOR)


# ---------------------------------------------------------------- welch

def test_welch_zero():
    assert not np.any(welch_psd(np.zeros((2, 1024))))


def test_welch_matches_scipy():
    x = _noise(5000)
    f, ref = ss.welch(x, fs=SAMPLE_RATE, window=ss.get_window("hann", 256, fftbins=False),
                      nperseg=256, noverlap=128, nfft=256, detrend=False, scaling="density",
                      average="mean", axis=-1)
    np.testing.assert_allclose(welch_psd(x), ref, rtol=1e-10)


def test_welch_sine_single_bin():
    t = np.arange(8192) / SAMPLE_RATE
    x = np.sin(2 * np.pi * 20 * SAMPLE_RATE / 256 * t)
    p = welch_psd(np.stack([x, x]))[0]
    # a Hann window leaks into the two neighbors of the bin center; the main bin
    # carries a fixed share of the power
    assert p.argmax() == 20
    assert p[19:22].sum() / p.sum() > 0.99


def test_welch_parseval_white_noise():
    x = _noise(1 << 16, seed=3)
    p = welch_psd(x)
    df = SAMPLE_RATE / 256
    total = p.sum(axis=1) * df
    np.testing.assert_allclose(total, x.var(axis=1), rtol=0.05)


def test_psd_dims():
    x = _noise(2048)
    assert psd_vector(x).shape == (258,)
    np.testing.assert_allclose(log_psd(x), np.log(psd_vector(x) + 1e-10))


def test_pooling_identity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.standard_normal((2, int(rng.integers(600, 5000))))
        X = stft(x, win=256, hop=128, fft=256)
        w = hann_window(256)
        wts = np.full(129, 2.0)
        wts[[0, -1]] = 1.0
        pooled = (np.abs(X) ** 2).mean(axis=1) * wts / (SAMPLE_RATE * np.sum(w * w))
        p = welch_psd(x)
        assert np.max(np.abs(pooled - p) / p) < 1e-9


@given(st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_welch_power_linearity(c, seed):
    x = _noise(1024, seed)
    np.testing.assert_allclose(welch_psd(c * x), c * c * welch_psd(x), rtol=1e-9)


def test_welch_deterministic():
    x = _noise(3000)
    assert welch_psd(x).tobytes() == welch_psd(x.copy()).tobytes()


def test_welch_errors():
    with pytest.raises(ValueError):
        welch_psd(np.zeros((2, 100)))
    with pytest.raises(ValueError):
        welch_psd(np.zeros((2, 1000)), overlap=256)


# ---------------------------------------------------------------- waveform

def test_waveform_invariants():
    with pytest.raises(ValueError):
        Waveform(np.zeros((1, 1000)))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 100)))
    w = Waveform(np.zeros((2, 600)))
    assert len(w) == 600 and w.channels == 2
    with pytest.raises(ValueError):
        w.samples[0, 0] = 1.0


def test_pcm16_roundtrip(tmp_path):
    x = np.clip(_noise(2000) * 0.3, -1, 1)
    path = tmp_path / "a.pcm"
    write_pcm16(path, Waveform(x))
    y = read_pcm16(path).samples
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) <= 0.5 / 32767 + 1e-12
