"""Deterministic synthetic corpora standing in for real cough recordings.

A cough proxy is a burst of enveloped, band-limited noise (300-3000 Hz
nominal band). The two screening classes differ only in the spectral tilt of
their bursts: positive proxies rise with frequency, negative proxies fall.
Gate negatives are near-silence, steady tones and stationary noise.
"""

from __future__ import annotations

import datetime as dt
import json
import os
from typing import Optional

import numpy as np

from .audio_io import AudioBuffer, write_wav
from .segmenter import CHUNK_LEN, CHUNK_RATE, Chunk

RATE = CHUNK_RATE
TILT_RANGE_DB_PER_OCT = (1.0, 5.0)
BAND_LOW_HZ = (250.0, 400.0)
BAND_HIGH_HZ = (2500.0, 3500.0)
BACKGROUND_DB = (-65.0, -45.0)


def _db(x):
    return 10.0 ** (x / 20.0)


def shaped_noise(rng: np.random.Generator, n: int, tilt_db_per_oct: float, low_hz: float, high_hz: float,
                 rate: int = RATE) -> np.ndarray:
    """Unit-RMS noise band-limited to [low, high] with a spectral tilt."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    safe = np.maximum(f, 1.0)
    gain = (safe / 1000.0) ** (tilt_db_per_oct / 6.0206)
    # raised-cosine band edges, 100 Hz wide
    edge = 100.0
    lo = np.clip((f - (low_hz - edge)) / edge, 0, 1)
    hi = np.clip(((high_hz + edge) - f) / edge, 0, 1)
    band = (0.5 - 0.5 * np.cos(np.pi * lo)) * (0.5 - 0.5 * np.cos(np.pi * hi))
    y = np.fft.irfft(spec * gain * band, n=n)
    rms = np.sqrt(np.mean(y * y))
    return y / rms if rms > 0 else y


def cough_burst(rng: np.random.Generator, positive: bool, rate: int = RATE) -> np.ndarray:
    """One cough-like burst: fast attack, exponential decay."""
    dur = rng.uniform(0.15, 0.4)
    n = int(dur * rate)
    tilt = rng.uniform(*TILT_RANGE_DB_PER_OCT) * (1 if positive else -1)
    noise = shaped_noise(rng, n, tilt, rng.uniform(*BAND_LOW_HZ), rng.uniform(*BAND_HIGH_HZ), rate)
    t = np.arange(n) / rate
    attack = rng.uniform(0.005, 0.03)
    env = np.minimum(t / attack, 1.0) * np.exp(-np.maximum(t - attack, 0) / rng.uniform(0.04, 0.12))
    burst = noise * env
    return burst / np.max(np.abs(burst))


def background(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal(n) * _db(rng.uniform(*BACKGROUND_DB))


def cough_recording(rng: np.random.Generator, positive: bool, n_coughs: Optional[int] = None,
                    rate: int = RATE) -> np.ndarray:
    """A recording with one burst in each 1 s window, peak 0.9."""
    if n_coughs is None:
        n_coughs = int(rng.integers(1, 3))
    x = background(rng, n_coughs * rate)
    for i in range(n_coughs):
        burst = cough_burst(rng, positive, rate) * rng.uniform(0.5, 1.0)
        start = i * rate + int(rng.uniform(0.05, 0.5) * rate)
        x[start:start + len(burst)] += burst
    return x * (0.9 / np.max(np.abs(x)))


def silence(rng: np.random.Generator, seconds: float = 2.0, rate: int = RATE) -> np.ndarray:
    return np.zeros(int(seconds * rate))


# --- gate corpus ------------------------------------------------------------

def _gate_positive(rng):
    x = background(rng, CHUNK_LEN)
    for _ in range(int(rng.integers(1, 3))):
        burst = cough_burst(rng, bool(rng.integers(2)))
        start = int(rng.integers(0, CHUNK_LEN - len(burst)))
        x[start:start + len(burst)] += burst * rng.uniform(0.3, 0.9)
    return x


def _gate_negative(rng):
    kind = int(rng.integers(3))
    t = np.arange(CHUNK_LEN) / RATE
    if kind == 0:
        return background(rng, CHUNK_LEN)
    level = rng.uniform(0.05, 0.6)
    if kind == 1:
        f0 = rng.uniform(100, 2000)
        x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 4) if f0 * h < 7000)
        return level * x / np.max(np.abs(x)) + background(rng, CHUNK_LEN)
    tilt = rng.uniform(-6, 3)
    return level * 0.3 * shaped_noise(rng, CHUNK_LEN, tilt, rng.uniform(50, 500), rng.uniform(3000, 7500))


def gate_corpus(n: int = 500, seed: int = 0) -> list[tuple[Chunk, bool]]:
    """Balanced labeled chunks for gate training: even index = cough."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        is_cough = i % 2 == 0
        x = _gate_positive(rng) if is_cough else _gate_negative(rng)
        out.append((Chunk(np.clip(x, -1, 1), f"gate-{seed}-{i:04d}"), is_cough))
    return out


# --- manifest corpus --------------------------------------------------------

FILES_PER_INDIVIDUAL = 2
_SYMPTOMS = ("fever", "tiredness", "sore_throat", "difficulty_breathing", "chest_pain_pressure", "diarrhoea", "cough")


def _record_meta(rng, individual: int, positive: bool, base_date: dt.date) -> dict:
    test_date = base_date + dt.timedelta(days=int(rng.integers(0, 60)))
    rec_date = test_date + dt.timedelta(days=int(rng.integers(0, 4)))
    symptoms = {}
    for s in _SYMPTOMS:
        if rng.random() < (0.35 if positive else 0.15):
            symptoms[s] = (rec_date - dt.timedelta(days=int(rng.integers(0, 5)))).isoformat()
    return {
        "individual_id": f"synth-{individual:04d}",
        "label": "positive" if positive else "negative",
        "test_type": "pcr",
        "test_date": test_date.isoformat(),
        "recording_date": rec_date.isoformat(),
        "age": int(rng.integers(18, 80)),
        "sex": ["female", "male"][int(rng.integers(2))],
        "location": "synthetic",
        "symptoms": symptoms,
        "triage": {
            "symptomatic_now": bool(symptoms),
            "close_contact": bool(rng.random() < (0.6 if positive else 0.2)),
            "breathing_problems": "difficulty_breathing" in symptoms,
            "risk_group": bool(rng.random() < 0.2),
        },
    }


def synth_corpus(out_dir, n: int, seed: int = 0) -> str:
    """Write ``n`` WAVs plus ``manifest.jsonl`` to ``out_dir``.

    Individuals own two consecutive files and alternate labels, so half of
    the files are positive proxies. Output bytes depend only on
    ``(n, seed)``. Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    base_date = dt.date(2020, 8, 1)
    lines = []
    meta = None
    for i in range(n):
        individual = i // FILES_PER_INDIVIDUAL
        positive = individual % 2 == 1
        if i % FILES_PER_INDIVIDUAL == 0:
            meta = _record_meta(rng, individual, positive, base_date)
        x = cough_recording(rng, positive)
        name = f"rec-{i:05d}.wav"
        write_wav(AudioBuffer(x, RATE, name), os.path.join(out_dir, name))
        rec = dict(meta, audio_path=name)
        lines.append(json.dumps(rec, sort_keys=True))
    path = os.path.join(out_dir, "manifest.jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))
    return path


def synth_gate_corpus(out_dir, n: int, seed: int = 0) -> str:
    """Write a labeled gate corpus (1 s WAV chunks) and ``gate_manifest.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, (chunk, is_cough) in enumerate(gate_corpus(n, seed)):
        name = f"gate-{i:05d}.wav"
        write_wav(AudioBuffer(chunk.samples, RATE, name), os.path.join(out_dir, name))
        lines.append(json.dumps({"audio_path": name, "cough": is_cough}, sort_keys=True))
    path = os.path.join(out_dir, "gate_manifest.jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))
    return path
