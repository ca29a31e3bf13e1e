import math

import numpy as np
import pytest

from coughscreen.features import (
    AugmentConfig,
    FeatureConfig,
    MelFeature,
    analysis_window,
    augment,
    log_mel,
    mel_centers_hz,
    mel_filterbank,
    mfcc,
    onesided_energy,
    read_feature_tensor,
    standardize,
    stft_power,
    write_feature_tensor,
)
from coughscreen.segmenter import Chunk

CFG = FeatureConfig()


def naive_dft(x, n_fft):
    """Textbook O(N^2) DFT, one-sided."""
    x = np.pad(np.asarray(x, dtype=np.float64), (0, n_fft - len(x)))
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * n / n_fft)).sum(axis=1)


def naive_dct2_ortho(v):
    n = len(v)
    out = np.empty(n)
    for k in range(n):
        s = sum(v[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out[k] = s * (math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n))
    return out


def htk_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


# --- STFT ---------------------------------------------------------------------------

def test_fast_dft_matches_naive_on_random_frames():
    rng = np.random.default_rng(0)
    x = rng.normal(size=16000)
    power = stft_power(x, CFG)
    win = analysis_window(CFG.frame_len)
    for i in rng.choice(power.shape[1], size=40, replace=False):
        frame = x[i * CFG.hop:i * CFG.hop + CFG.frame_len] * win
        ref = np.abs(naive_dft(frame, CFG.fft_size)) ** 2
        assert np.max(np.abs(power[:, i] - ref)) <= 1e-6 * np.max(ref)


def test_parseval_per_frame():
    rng = np.random.default_rng(1)
    x = rng.normal(size=16000)
    power = stft_power(x, CFG)
    win = analysis_window(CFG.frame_len)
    energy = onesided_energy(power, CFG.fft_size)
    for i in range(power.shape[1]):
        frame = x[i * CFG.hop:i * CFG.hop + CFG.frame_len] * win
        assert energy[i] == pytest.approx(np.sum(frame**2), rel=1e-6)


def test_zero_chunk_power_is_zero():
    assert not np.any(stft_power(np.zeros(16000), CFG))


def test_bin_centered_sine_concentrates():
    k0 = 40  # 40 * 16000/512 = 1250 Hz
    t = np.arange(16000)
    x = np.sin(2 * np.pi * k0 * t / CFG.fft_size)
    p = stft_power(x, CFG)
    share = p[k0 - 1:k0 + 2].sum(axis=0) / p.sum(axis=0)
    assert np.all(share >= 0.9)


# --- Mel filterbank -----------------------------------------------------------------

def test_centers_invert_to_uniform_mel_spacing():
    for cfg in (CFG, FeatureConfig(n_mels=40, fmin_hz=20, fmax_hz=7600), FeatureConfig(n_mels=128, fmin_hz=0)):
        mels = np.array([htk_mel(f) for f in mel_centers_hz(cfg)])
        step = (htk_mel(cfg.fmax_hz) - htk_mel(cfg.fmin_hz)) / (cfg.n_mels + 1)
        expected = htk_mel(cfg.fmin_hz) + step * np.arange(1, cfg.n_mels + 1)
        assert np.max(np.abs(mels - expected)) <= 1e-9
        assert np.max(np.abs(np.diff(mels) - step)) <= 1e-9


def test_two_filter_bank_peaks():
    cfg = FeatureConfig(n_mels=2, n_mfcc=2, fmin_hz=0, fmax_hz=8000)
    fb = mel_filterbank(cfg)
    top = htk_mel(8000)
    freqs = np.arange(cfg.fft_size // 2 + 1) * 16000 / cfg.fft_size
    for row, frac in zip(fb, (1 / 3, 2 / 3)):
        target_hz = 700 * (10 ** (frac * top / 2595) - 1)
        assert abs(freqs[np.argmax(row)] - target_hz) <= 16000 / cfg.fft_size


def test_filterbank_rows_positive_and_monotone():
    for cfg in (CFG, FeatureConfig(n_mels=128, fmin_hz=0)):
        fb = mel_filterbank(cfg)
        assert fb.shape == (cfg.n_mels, cfg.fft_size // 2 + 1)
        assert np.all(fb.max(axis=1) > 0)
        assert np.all(np.diff(mel_centers_hz(cfg)) > 0)
        peaks = np.argmax(fb, axis=1)
        assert np.all(np.diff(peaks) >= 0)


# --- log-Mel --------------------------------------------------------------------------

def test_log_mel_shape_and_zero_chunk():
    f = log_mel(Chunk(np.zeros(16000)), CFG)
    assert f.matrix.shape == (64, 98) == (CFG.n_mels, CFG.n_frames())
    assert np.all(f.matrix == math.log(CFG.log_floor))
    assert f.mfcc is None


def test_doubling_amplitude_adds_ln4():
    x = np.random.default_rng(2).normal(0, 0.1, 16000)
    a = log_mel(Chunk(x)).matrix
    b = log_mel(Chunk(2 * x)).matrix
    above = a > math.log(CFG.log_floor) + 1
    np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-9)


def test_mfcc_optional():
    f = log_mel(Chunk(np.random.default_rng(3).normal(0, 0.1, 16000)), FeatureConfig(use_mfcc=True))
    assert f.mfcc.shape == (13, 98)


# --- MFCC ---------------------------------------------------------------------------

def test_dct_of_constant():
    out = mfcc(np.full((64, 3), 2.5), 13)
    np.testing.assert_allclose(out[0], 2.5 * math.sqrt(64), atol=1e-12)
    assert np.max(np.abs(out[1:])) <= 1e-12


def test_dct_matches_definition():
    v = np.random.default_rng(4).normal(size=(64, 5))
    out = mfcc(v, 64)
    for j in range(5):
        np.testing.assert_allclose(out[:, j], naive_dct2_ortho(v[:, j]), atol=1e-9)


def test_full_dct_inverts():
    import scipy.fft

    v = np.random.default_rng(5).normal(size=(64, 7))
    back = scipy.fft.idct(mfcc(v, 64), type=2, norm="ortho", axis=0)
    assert np.max(np.abs(back - v)) <= 1e-9
    with pytest.raises(ValueError):
        mfcc(v, 65)


# --- augmentation ----------------------------------------------------------------------

def _feature(seed=0):
    return log_mel(Chunk(np.random.default_rng(seed).normal(0, 0.1, 16000)))


def test_augment_disabled_is_identity():
    f = _feature()
    assert augment(f, 1, AugmentConfig(enabled=False)) is f


def test_augment_unit_draw_is_identity():
    f = _feature()
    cfg = AugmentConfig(scale_range=(1.0, 1.0), rotate_max_deg=0.0, enabled=True)
    assert np.max(np.abs(augment(f, 7, cfg).matrix - f.matrix)) <= 1e-6


def test_augment_deterministic_and_changes_image():
    f = _feature()
    cfg = AugmentConfig(enabled=True)
    a = augment(f, 42, cfg).matrix
    b = augment(_feature(), 42, cfg).matrix
    assert a.tobytes() == b.tobytes()
    assert a.shape == f.matrix.shape
    assert not np.array_equal(a, f.matrix)
    assert not np.array_equal(a, augment(f, 43, cfg).matrix)


def test_augment_fills_border_with_floor():
    f = MelFeature(np.zeros((64, 98)))
    cfg = AugmentConfig(scale_range=(0.9, 0.9), rotate_max_deg=0.0, enabled=True)
    out = augment(f, 0, cfg).matrix
    assert out[0, 0] == pytest.approx(math.log(1e-10))


# --- standardize --------------------------------------------------------------------------

def test_standardize_stats_and_flag():
    feats = [_feature(s) for s in range(4)]
    std, (mean, sd) = standardize(feats)
    allv = np.concatenate([f.matrix.ravel() for f in std])
    assert abs(allv.mean()) <= 1e-6 and abs(allv.std() - 1) <= 1e-6
    assert all(f.standardized for f in std)
    with pytest.raises(ValueError):
        standardize(std, (mean, sd))
    again, _ = standardize([_feature(9)], (mean, sd))
    np.testing.assert_allclose(again[0].matrix, (_feature(9).matrix - mean) / sd)


def test_standardize_constant_set():
    feats = [MelFeature(np.full((64, 98), 3.0)) for _ in range(3)]
    out, (mean, sd) = standardize(feats)
    assert sd == 0.0
    assert all(np.all(f.matrix == 0) for f in out)


# --- tensor file ---------------------------------------------------------------------------

def test_tensor_round_trip(tmp_path):
    t = np.random.default_rng(6).normal(size=(3, 64, 98)).astype(np.float32)
    p = tmp_path / "t.cft"
    write_feature_tensor(p, t)
    raw = p.read_bytes()
    assert raw[:4] == b"CFT1" and np.frombuffer(raw[4:16], "<u4").tolist() == [3, 64, 98]
    assert len(raw) == 16 + 4 * t.size
    np.testing.assert_array_equal(read_feature_tensor(p), t)
    p.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_feature_tensor(p)
