"""1 s chunking and the cough/non-cough gate.

The gate is a logistic model over six hand-built chunk descriptors. It is
trained with plain gradient descent on standardized descriptors; the
standardization is folded back into the weights, so a GateModel is just
seven numbers plus a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .audio_io import AudioBuffer
from .errors import NoCoughDetected, SingleClass

CHUNK_RATE = 16000
CHUNK_LEN = CHUNK_RATE
MAX_PAD_FRACTION = 0.95
ENERGY_FLOOR_DB = -80.0
BURST_FRAME = 160
BURST_FACTOR = 3.0
FLATNESS_NFFT = 512

FEATURE_NAMES = (
    "log_rms_db",
    "zero_crossing_rate",
    "spectral_centroid_hz",
    "spectral_flatness",
    "peak_to_rms",
    "burst_count",
)


@dataclass
class Chunk:
    samples: np.ndarray
    source_id: str = ""
    start_offset_s: float = 0.0
    padded_samples: int = 0
    gate_score: Optional[float] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (CHUNK_LEN,):
            raise ValueError(f"chunk must hold exactly {CHUNK_LEN} samples")
        if not 0 <= self.padded_samples < CHUNK_LEN:
            raise ValueError("padded_samples out of range")

    @property
    def ref(self) -> str:
        return f"{self.source_id}@{self.start_offset_s:g}"

    @property
    def content(self) -> np.ndarray:
        """The samples that came from the recording (padding removed)."""
        return self.samples[:CHUNK_LEN - self.padded_samples]


def chunk_audio(buffer: AudioBuffer, max_pad_fraction: float = MAX_PAD_FRACTION) -> list[Chunk]:
    """Split into consecutive non-overlapping 1 s chunks.

    The last partial window is zero-padded; it is dropped when padding would
    be at least ``max_pad_fraction`` of the chunk.
    """
    if buffer.sample_rate_hz != CHUNK_RATE:
        raise ValueError(f"chunk_audio needs {CHUNK_RATE} Hz audio, got {buffer.sample_rate_hz}")
    x = buffer.samples
    chunks = []
    for start in range(0, len(x), CHUNK_LEN):
        piece = x[start:start + CHUNK_LEN]
        pad = CHUNK_LEN - len(piece)
        if pad >= max_pad_fraction * CHUNK_LEN:
            break
        if pad:
            piece = np.pad(piece, (0, pad))
        chunks.append(Chunk(piece, buffer.source_id, start / CHUNK_RATE, pad))
    return chunks


def expected_chunk_count(n_samples: int, max_pad_fraction: float = MAX_PAD_FRACTION) -> int:
    full, rem = divmod(n_samples, CHUNK_LEN)
    return full + (1 if rem and CHUNK_LEN - rem < max_pad_fraction * CHUNK_LEN else 0)


def extract_gate_features(chunk) -> np.ndarray:
    """Six descriptors of a chunk, in FEATURE_NAMES order.

    Zero-crossing rate is crossings per sample. Spectral centroid and
    flatness use a Welch average of 512-point Hann periodograms. Burst count
    is the number of 10 ms frames whose energy exceeds three times the
    median frame energy.
    """
    x = np.asarray(getattr(chunk, "samples", chunk), dtype=np.float64)
    rms = math.sqrt(float(np.mean(x * x)))
    log_rms = max(20.0 * math.log10(rms), ENERGY_FLOOR_DB) if rms > 0 else ENERGY_FLOOR_DB

    s = np.signbit(x[x != 0])
    zcr = float(np.count_nonzero(s[1:] != s[:-1])) / len(x)

    n_seg = len(x) // FLATNESS_NFFT
    segs = x[:n_seg * FLATNESS_NFFT].reshape(n_seg, FLATNESS_NFFT) * np.hanning(FLATNESS_NFFT)
    psd = (np.abs(np.fft.rfft(segs, axis=1)) ** 2).mean(axis=0)[1:]
    freqs = np.fft.rfftfreq(FLATNESS_NFFT, 1.0 / CHUNK_RATE)[1:]
    total = float(psd.sum())
    if total > 0:
        centroid = float((freqs * psd).sum() / total)
        flatness = float(np.exp(np.mean(np.log(psd + 1e-30))) / np.mean(psd))
    else:
        centroid = flatness = 0.0

    peak_to_rms = float(np.max(np.abs(x)) / rms) if rms > 0 else 0.0

    frame_e = (x[:len(x) // BURST_FRAME * BURST_FRAME].reshape(-1, BURST_FRAME) ** 2).sum(axis=1)
    bursts = int(np.count_nonzero(frame_e > BURST_FACTOR * np.median(frame_e)))

    return np.array([log_rms, zcr, centroid, flatness, peak_to_rms, float(bursts)])


@dataclass(frozen=True)
class GateModel:
    weights: tuple[float, ...] = (0.0,) * 7
    decision_threshold: float = 0.5
    train_accuracy: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != len(FEATURE_NAMES) + 1:
            raise ValueError("gate needs 7 weights (6 features + bias)")
        if not all(math.isfinite(w) for w in self.weights):
            raise ValueError("gate weights must be finite")
        if not 0 <= self.decision_threshold <= 1:
            raise ValueError("decision_threshold must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "decision_threshold": self.decision_threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "GateModel":
        return cls(tuple(d["weights"]), d.get("decision_threshold", 0.5))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def gate_score_features(features: np.ndarray, model: GateModel) -> np.ndarray:
    w = np.asarray(model.weights)
    return _sigmoid(np.asarray(features) @ w[:-1] + w[-1])


def gate_score(chunk, model: GateModel) -> float:
    return float(gate_score_features(extract_gate_features(chunk), model))


@dataclass
class GateFit:
    model: GateModel
    losses: list[float]
    train_accuracy: float


def train_gate(labeled_chunks: Sequence, epochs: int = 500, learning_rate: float = 0.5,
               threshold: float = 0.5) -> GateFit:
    """Fit the gate by full-batch gradient descent on mean cross-entropy.

    Args:
        labeled_chunks: ``(chunk, is_cough)`` pairs. A chunk may also be a
            precomputed 6-vector of descriptors.
        epochs: gradient steps.
        learning_rate: step size in standardized descriptor space.

    Returns:
        GateFit with the model, the per-epoch loss curve and training accuracy.
    """
    feats = []
    labels = []
    for c, y in labeled_chunks:
        if isinstance(c, Chunk) or np.shape(c) != (len(FEATURE_NAMES),):
            feats.append(extract_gate_features(c))
        else:
            feats.append(np.asarray(c, dtype=np.float64))
        labels.append(1.0 if y else 0.0)
    X = np.array(feats)
    y = np.array(labels)
    if len(np.unique(y)) < 2:
        raise SingleClass("gate training needs both cough and non-cough chunks")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    w = np.zeros(Z.shape[1])
    b = 0.0
    losses = []
    for _ in range(epochs):
        p = _sigmoid(Z @ w + b)
        pc = np.clip(p, 1e-12, 1 - 1e-12)
        losses.append(float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
        err = p - y
        w -= learning_rate * (Z.T @ err) / len(y)
        b -= learning_rate * float(err.mean())
    raw_w = w / sd
    raw_b = b - float(np.sum(w * mu / sd))
    model = GateModel(tuple(raw_w) + (raw_b,), threshold)
    acc = float(np.mean((gate_score_features(X, model) >= threshold) == (y == 1)))
    return GateFit(replace(model, train_accuracy=acc), losses, acc)


def filter_cough_chunks(chunks: Sequence[Chunk], model: GateModel, raise_on_empty: bool = True) -> list[Chunk]:
    """Keep chunks whose gate score reaches the threshold, in input order.

    Every input chunk gets its ``gate_score`` set.
    """
    kept = []
    for c in chunks:
        c.gate_score = gate_score(c, model)
        if c.gate_score >= model.decision_threshold:
            kept.append(c)
    if not kept and raise_on_empty:
        raise NoCoughDetected("no chunk passed the cough gate")
    return kept
