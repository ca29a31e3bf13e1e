"""Canonicalization of decoded audio: resample, denoise when noisy, normalize."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.ndimage
import scipy.signal

from .audio_io import AudioBuffer
from .errors import SilentAudio
from .features import frame_signal, onesided_energy

SILENCE_PEAK = 1e-6
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64
ANALYSIS_FRAME_S = 0.032
LOUD_FRACTION = 0.1
FLOOR_SMOOTH_BINS = 31
POWER_FLOOR = 1e-20


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate_hz: int = 16000
    target_peak: float = 0.9
    snr_denoise_threshold_db: float = 15.0
    noise_floor_percentile: float = 0.1
    gate_over_subtraction: float = 1.5

    def __post_init__(self):
        if self.target_rate_hz <= 0:
            raise ValueError("target_rate_hz must be positive")
        if not 0 < self.target_peak <= 1:
            raise ValueError("target_peak must be in (0, 1]")
        if not 0 < self.noise_floor_percentile < 1:
            raise ValueError("noise_floor_percentile must be in (0, 1)")
        if self.gate_over_subtraction < 1:
            raise ValueError("gate_over_subtraction must be >= 1")


@dataclass(frozen=True)
class ProcessingReport:
    denoise_applied: bool
    snr_db: float
    scale_factor: float
    source_rate_hz: int = 0

    def to_dict(self) -> dict:
        return {
            "denoise_applied": self.denoise_applied,
            "snr_db": self.snr_db,
            "scale_factor": self.scale_factor,
            "source_rate_hz": self.source_rate_hz,
        }


# --- resampling -------------------------------------------------------------

def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype with TAPS_PER_PHASE taps per phase.

    Unit DC gain; ``resample_poly`` applies the factor ``up`` itself.
    """
    ratio = max(up, down)
    half = TAPS_PER_PHASE * ratio // 2
    return scipy.signal.firwin(2 * half + 1, 1.0 / ratio, window=("kaiser", KAISER_BETA))


def resample(buffer: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Band-limited polyphase resampling.

    Output length is ``round(len * target / source)``.
    """
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    src = buffer.sample_rate_hz
    if src == target_rate_hz:
        return AudioBuffer(buffer.samples.copy(), src, buffer.source_id)
    frac = Fraction(target_rate_hz, src)
    up, down = frac.numerator, frac.denominator
    y = scipy.signal.resample_poly(buffer.samples, up, down, window=resample_filter(up, down))
    n_out = max(1, int(round(len(buffer.samples) * target_rate_hz / src)))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioBuffer(y[:n_out], target_rate_hz, buffer.source_id)


# --- normalization ----------------------------------------------------------

def peak_normalize(buffer: AudioBuffer, target_peak: float = 0.9) -> AudioBuffer:
    peak = float(np.max(np.abs(buffer.samples)))
    if peak < SILENCE_PEAK:
        raise SilentAudio(f"{buffer.source_id or 'audio'}: peak {peak:.3g} below silence threshold")
    if peak == target_peak:
        return AudioBuffer(buffer.samples.copy(), buffer.sample_rate_hz, buffer.source_id)
    return AudioBuffer(buffer.samples * (target_peak / peak), buffer.sample_rate_hz, buffer.source_id)


# --- SNR / noise floor ------------------------------------------------------

def _hann(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _frame_len(rate: int) -> int:
    n = int(round(ANALYSIS_FRAME_S * rate))
    return n + (n % 2)


def _analysis_cells(x: np.ndarray, n: int) -> np.ndarray:
    """|X|^2 of Hann frames with 50% overlap, shape (frames, bins)."""
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    frames = frame_signal(x, n, n // 2) * _hann(n)
    spec = np.fft.rfft(frames, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def _low_fraction_mean_exponential(p: float) -> float:
    # Mean of the lowest p-fraction of an Exp(1) variable.
    q = -math.log1p(-p)
    return (1.0 - (1.0 - p) * (1.0 + q)) / p


def noise_floor_psd(cells: np.ndarray, percentile: float) -> np.ndarray:
    """Per-bin noise power estimate.

    For each bin, average the quietest ``percentile`` of frames, undo the
    downward bias that selection has on exponentially distributed periodogram
    cells, then median-smooth across frequency so stationary tones are not
    mistaken for noise.
    """
    n_frames = cells.shape[0]
    k = max(1, int(math.ceil(percentile * n_frames)))
    quiet = np.sort(cells, axis=0)[:k].mean(axis=0)
    if k < n_frames:
        quiet = quiet / _low_fraction_mean_exponential(k / n_frames)
    size = min(FLOOR_SMOOTH_BINS, cells.shape[1])
    return scipy.ndimage.median_filter(quiet, size=size, mode="nearest")


def estimate_snr_db(buffer: AudioBuffer, cfg: PreprocessConfig = PreprocessConfig()) -> float:
    """Loud-frame power over estimated noise power, in dB.

    Signal power is the mean power of the loudest 10% of 32 ms frames; noise
    power is the full-band total of :func:`noise_floor_psd`.
    """
    n = _frame_len(buffer.sample_rate_hz)
    cells = _analysis_cells(buffer.samples, n)
    wenergy = float(np.sum(_hann(n) ** 2))
    frame_power = onesided_energy(cells.T, n) / wenergy
    k = max(1, int(math.ceil(LOUD_FRACTION * len(frame_power))))
    signal = float(np.sort(frame_power)[-k:].mean())
    psd = noise_floor_psd(cells, cfg.noise_floor_percentile)
    noise = float(onesided_energy(psd[:, None], n)[0]) / wenergy
    return 10.0 * math.log10(max(signal, POWER_FLOOR) / max(noise, POWER_FLOOR))


# --- spectral subtraction ---------------------------------------------------

def spectral_gate_denoise(buffer: AudioBuffer, cfg: PreprocessConfig = PreprocessConfig()) -> AudioBuffer:
    """Magnitude spectral subtraction with overlap-add resynthesis.

    The noise magnitude per bin is ``sqrt(noise_floor_psd)``; it is scaled by
    ``gate_over_subtraction`` and subtracted from every STFT magnitude,
    flooring at zero. Phase is kept. Output length equals input length.
    """
    x = buffer.samples
    n = _frame_len(buffer.sample_rate_hz)
    hop = n // 2
    win = _hann(n)
    noise_mag = np.sqrt(noise_floor_psd(_analysis_cells(x, n), cfg.noise_floor_percentile))

    # pad so every output sample is covered by two frames
    tail = (-(len(x) + 2 * n)) % hop
    xp = np.pad(x, (n, n + tail))
    spec = np.fft.rfft(frame_signal(xp, n, hop) * win, axis=1)
    mag = np.abs(spec)
    gain = np.maximum(mag - cfg.gate_over_subtraction * noise_mag, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cleaned = np.where(mag > 0, spec * (gain / mag), 0.0)
    frames = np.fft.irfft(cleaned, n=n, axis=1)
    out = np.zeros(len(xp))
    for i, fr in enumerate(frames):
        out[i * hop:i * hop + n] += fr
    # periodic Hann at 50% overlap sums to one, so plain overlap-add inverts
    return AudioBuffer(out[n:n + len(x)], buffer.sample_rate_hz, buffer.source_id)


# --- full chain -------------------------------------------------------------

def preprocess_with_report(buffer: AudioBuffer, cfg: PreprocessConfig = PreprocessConfig()):
    """resample -> denoise if SNR is low -> peak normalize.

    Returns ``(buffer, ProcessingReport)``; raises SilentAudio.
    """
    src_rate = buffer.sample_rate_hz
    y = resample(buffer, cfg.target_rate_hz)
    if float(np.max(np.abs(y.samples))) < SILENCE_PEAK:
        raise SilentAudio(f"{buffer.source_id or 'audio'}: silent")
    snr = estimate_snr_db(y, cfg)
    denoised = snr < cfg.snr_denoise_threshold_db
    if denoised:
        y = spectral_gate_denoise(y, cfg)
    peak = float(np.max(np.abs(y.samples)))
    out = peak_normalize(y, cfg.target_peak)
    return out, ProcessingReport(denoised, snr, cfg.target_peak / peak, src_rate)


def preprocess(buffer: AudioBuffer, cfg: PreprocessConfig = PreprocessConfig()) -> AudioBuffer:
    return preprocess_with_report(buffer, cfg)[0]
