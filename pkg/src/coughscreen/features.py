"""Log-Mel / MFCC feature images for 1 s chunks, plus augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.fft
import scipy.ndimage
import scipy.signal


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 64
    fmin_hz: float = 50.0
    fmax_hz: float = 8000.0
    n_mfcc: int = 13
    log_floor: float = 1e-10
    use_mfcc: bool = False
    sample_rate: int = 16000

    def __post_init__(self):
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be >= frame_len")
        if self.fmax_hz > self.sample_rate / 2:
            raise ValueError("fmax_hz exceeds Nyquist")
        if self.n_mels < 2:
            raise ValueError("n_mels must be >= 2")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must be <= n_mels")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValueError("need 0 <= fmin_hz < fmax_hz")

    def n_frames(self, n_samples: int = 16000) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotate_max_deg: float = 5.0
    enabled: bool = False


@dataclass
class MelFeature:
    matrix: np.ndarray
    mfcc: Optional[np.ndarray] = None
    chunk_ref: str = ""
    standardized: bool = False


def _samples(chunk) -> np.ndarray:
    return np.asarray(getattr(chunk, "samples", chunk), dtype=np.float64)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Frames as rows; trailing samples that do not fill a frame are dropped."""
    n = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def analysis_window(frame_len: int) -> np.ndarray:
    return scipy.signal.get_window("hann", frame_len, fftbins=True)


def stft_power(chunk, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Power spectrogram, shape ``(fft_size // 2 + 1, n_frames)``."""
    x = _samples(chunk)
    frames = frame_signal(x, cfg.frame_len, cfg.hop) * analysis_window(cfg.frame_len)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def onesided_energy(power: np.ndarray, n_fft: int) -> np.ndarray:
    """(1/N) * sum over the full spectrum, recovered from the one-sided half."""
    w = np.full(power.shape[0], 2.0)
    w[0] = 1.0
    if n_fft % 2 == 0:
        w[-1] = 1.0
    return (w[:, None] * power).sum(axis=0) / n_fft


def mel_centers_hz(cfg: FeatureConfig) -> np.ndarray:
    pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(cfg: FeatureConfig = FeatureConfig(), sample_rate: Optional[int] = None) -> np.ndarray:
    """Triangular filters, shape ``(n_mels, fft_size // 2 + 1)``, peak weight 1."""
    sr = cfg.sample_rate if sample_rate is None else sample_rate
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * sr / cfg.fft_size
    fb = np.zeros((cfg.n_mels, len(freqs)))
    for i in range(cfg.n_mels):
        left, center, right = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - left) / (center - left)
        down = (right - freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        if not fb[i].any():
            # narrower than one bin: fall back to the nearest bin
            fb[i, int(np.argmin(np.abs(freqs - center)))] = 1.0
    return fb


_FB_CACHE: dict = {}


def _cached_filterbank(cfg: FeatureConfig) -> np.ndarray:
    fb = _FB_CACHE.get(cfg)
    if fb is None:
        fb = mel_filterbank(cfg)
        fb.flags.writeable = False
        _FB_CACHE[cfg] = fb
    return fb


def mfcc(mel_matrix: np.ndarray, n_mfcc: int) -> np.ndarray:
    """Orthonormal DCT-II over the Mel axis, first ``n_mfcc`` rows kept."""
    mel_matrix = np.asarray(mel_matrix, dtype=np.float64)
    if n_mfcc > mel_matrix.shape[0]:
        raise ValueError("n_mfcc must be <= n_mels")
    return scipy.fft.dct(mel_matrix, type=2, norm="ortho", axis=0)[:n_mfcc]


def log_mel(chunk, cfg: FeatureConfig = FeatureConfig()) -> MelFeature:
    energies = _cached_filterbank(cfg) @ stft_power(chunk, cfg)
    matrix = np.log(np.maximum(energies, cfg.log_floor))
    coeffs = mfcc(matrix, cfg.n_mfcc) if cfg.use_mfcc else None
    return MelFeature(matrix=matrix, mfcc=coeffs, chunk_ref=str(getattr(chunk, "ref", "")))


def affine_image(matrix: np.ndarray, scale: float, angle_deg: float, fill: float) -> np.ndarray:
    """Scale and rotate an image about its center with bilinear sampling."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if scale == 1.0 and angle_deg == 0.0:
        return matrix.copy()
    th = math.radians(angle_deg)
    fwd = scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    inv = np.linalg.inv(fwd)
    center = (np.array(matrix.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - inv @ center
    return scipy.ndimage.affine_transform(matrix, inv, offset=offset, order=1, mode="constant", cval=fill)


def augment_matrix(matrix: np.ndarray, rng_seed: int, cfg: AugmentConfig, fill: float) -> np.ndarray:
    if not cfg.enabled:
        return matrix
    rng = np.random.default_rng(rng_seed)
    scale = rng.uniform(*cfg.scale_range)
    angle = rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)
    return affine_image(matrix, scale, angle, fill)


def augment(feature: MelFeature, rng_seed: int, cfg: AugmentConfig, log_floor: float = 1e-10) -> MelFeature:
    """Random scale/rotation of the log-Mel image (training only).

    Exposed border is filled with ``ln(log_floor)``; disabled config returns
    the feature unchanged.
    """
    if not cfg.enabled:
        return feature
    out = augment_matrix(feature.matrix, rng_seed, cfg, fill=math.log(log_floor))
    return replace(feature, matrix=out)


def standardize(features: Sequence[MelFeature], stats: Optional[tuple[float, float]] = None):
    """Z-score with one scalar mean/std.

    When ``stats`` is None they are computed from ``features`` (the training
    split). Returns ``(new_features, (mean, std))``.
    """
    if any(f.standardized for f in features):
        raise ValueError("feature already standardized")
    if stats is None:
        if not features:
            raise ValueError("cannot compute stats from an empty set")
        allv = np.concatenate([np.ravel(f.matrix) for f in features])
        mean = float(allv.mean())
        std = float(allv.std())
    else:
        mean, std = float(stats[0]), float(stats[1])
    denom = max(std, 1e-6)
    out = [replace(f, matrix=(np.asarray(f.matrix) - mean) / denom, standardized=True) for f in features]
    return out, (mean, std)


# --- tensor export ----------------------------------------------------------

TENSOR_MAGIC = b"CFT1"


def write_feature_tensor(path, tensor: np.ndarray) -> None:
    """Write a 3-D array as magic, three u32 dims, row-major float32."""
    t = np.asarray(tensor)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ValueError("tensor must be 2-D or 3-D")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<3I", *t.shape))
        f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_feature_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError("not a CFT1 tensor file")
    dims = struct.unpack("<3I", data[4:16])
    n = dims[0] * dims[1] * dims[2]
    body = data[16:]
    if len(body) != 4 * n:
        raise ValueError("tensor payload size does not match dims")
    return np.frombuffer(body, dtype="<f4").reshape(dims).copy()
