"""End-to-end flow: audio -> chunks -> gate -> log-Mel -> CNN -> recording score."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as nn
from .audio_io import AudioBuffer, convert_external, read_wav
from .bundle import ModelBundle, bundle_hash
from .config import PipelineConfig
from .dataset import SampleRecord, class_index, corpus_summary, split_by_individual
from .dsp import ProcessingReport, preprocess_with_report
from .errors import NoCoughDetected, SilentAudio, SingleClass
from .evaluation import ScoredChunk
from .features import MelFeature, log_mel, standardize
from .segmenter import Chunk, GateModel, chunk_audio, filter_cough_chunks, train_gate
from .synth import gate_corpus

log = logging.getLogger(__name__)

ADVISORY = (
    "Pre-screening estimate only. This result does not diagnose COVID-19 and cannot "
    "replace a laboratory test or a clinical assessment. If you have symptoms or were "
    "exposed, follow local health guidance and get tested."
)

POSITIVE_SCREEN = "positive_screen"
NEGATIVE_SCREEN = "negative_screen"
NO_COUGH = "no_cough_detected"


@dataclass
class ScreeningResult:
    submission_id: str
    n_chunks_total: int
    n_chunks_cough: int
    chunk_scores: list
    recording_score: Optional[float]
    label: str
    model_version: str
    advisory: str = ADVISORY
    reason: Optional[str] = None
    processing: Optional[dict] = None

    def __post_init__(self):
        if (self.label == NO_COUGH) != (self.n_chunks_cough == 0):
            raise ValueError("label must be no_cough_detected exactly when no chunk passed the gate")

    def to_dict(self) -> dict:
        return {
            "submission_id": self.submission_id,
            "n_chunks_total": self.n_chunks_total,
            "n_chunks_cough": self.n_chunks_cough,
            "chunk_scores": list(self.chunk_scores),
            "recording_score": self.recording_score,
            "label": self.label,
            "model_version": self.model_version,
            "advisory": self.advisory,
            "reason": self.reason,
            "processing": self.processing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScreeningResult":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


# --- audio to features --------------------------------------------------------

def load_audio(path, converter: Optional[str] = None) -> AudioBuffer:
    """Read a WAV; other extensions go through the external converter first."""
    if str(path).lower().endswith(".wav") or not (converter or os.environ.get("COUGH_CONVERTER")):
        return read_wav(path)
    tmp = convert_external(path, converter)
    try:
        buf = read_wav(tmp)
    finally:
        os.unlink(tmp)
    buf.source_id = os.fspath(path)
    return buf


def prepare_chunks(buffer: AudioBuffer, cfg: PipelineConfig) -> tuple[list[Chunk], ProcessingReport]:
    audio, report = preprocess_with_report(buffer, cfg.preprocess)
    return chunk_audio(audio), report


def cough_features(buffer: AudioBuffer, cfg: PipelineConfig, gate: GateModel):
    """Chunks, gated chunks and their log-Mel features; SilentAudio propagates."""
    chunks, report = prepare_chunks(buffer, cfg)
    kept = filter_cough_chunks(chunks, gate, raise_on_empty=False)
    feats = [log_mel(c, cfg.features) for c in kept]
    return chunks, kept, feats, report


def fit_gate(cfg: PipelineConfig, seed: int):
    p = cfg.pipeline
    corpus = gate_corpus(p.gate_corpus_size, seed)
    return train_gate(corpus, epochs=p.gate_epochs, learning_rate=p.gate_learning_rate, threshold=p.gate_threshold)


@dataclass
class RecordFeatures:
    record: SampleRecord
    features: list
    n_chunks: int
    report: Optional[ProcessingReport] = None
    error: Optional[str] = None


def featurize_records(records: Sequence[SampleRecord], cfg: PipelineConfig, gate: GateModel,
                      converter: Optional[str] = None) -> list[RecordFeatures]:
    out = []
    for r in records:
        try:
            buf = load_audio(r.resolved_path, converter)
            chunks, _, feats, report = cough_features(buf, cfg, gate)
            out.append(RecordFeatures(r, feats, len(chunks), report))
        except SilentAudio as exc:
            out.append(RecordFeatures(r, [], 0, None, f"silent: {exc}"))
        if not out[-1].features:
            log.warning("%s: no cough chunk passed the gate", r.audio_path)
    return out


def _labeled(items: Sequence[RecordFeatures], n_classes: int) -> list[tuple[MelFeature, int]]:
    return [(f, class_index(it.record.label, n_classes)) for it in items for f in it.features]


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    history: nn.TrainHistory
    plan: object = None
    test_items: list = field(default_factory=list)
    gate_train_accuracy: Optional[float] = None


def fit_bundle(train_items, val_items, cfg: PipelineConfig, gate: GateModel, progress=None):
    """Standardize, train the CNN and package a bundle. Returns (bundle, history)."""
    train_pairs = _labeled(train_items, cfg.model.n_classes)
    val_pairs = _labeled(val_items, cfg.model.n_classes)
    if len({y for _, y in train_pairs}) < 2:
        raise SingleClass("training split has chunks of a single class")
    if not val_pairs:
        raise ValueError("validation split produced no cough chunks")
    train_std, stats = standardize([f for f, _ in train_pairs])
    val_std, _ = standardize([f for f, _ in val_pairs], stats)
    fill = (math.log(cfg.features.log_floor) - stats[0]) / max(stats[1], 1e-6)
    weights, history = nn.train(
        [(f, y) for f, (_, y) in zip(train_std, train_pairs)],
        [(f, y) for f, (_, y) in zip(val_std, val_pairs)],
        cfg.model, cfg.train, augment_fill=fill, progress=progress,
    )
    bundle = ModelBundle(
        config=cfg.model, weights=weights, feature_stats=stats, gate=gate,
        decision_threshold=cfg.pipeline.decision_threshold, feature_config=cfg.features,
    )
    return bundle, history


def train_pipeline(records: Sequence[SampleRecord], cfg: PipelineConfig, seed: Optional[int] = None,
                   progress=None, converter: Optional[str] = None) -> TrainResult:
    """Gate + CNN training on a manifest with a per-individual split.

    ``seed`` (default ``cfg.train.seed``) drives the split, the synthetic gate
    corpus and the CNN optimizer.
    """
    seed = cfg.train.seed if seed is None else seed
    if cfg.train.seed != seed:
        cfg = cfg.with_values("train", seed=seed)
    stats = corpus_summary(records)
    if len(stats.per_label) < 2:
        raise SingleClass(f"corpus has a single class: {next(iter(stats.per_label), 'none')}")
    plan = split_by_individual(records, cfg.pipeline.split_fractions, seed)
    gate_fit = fit_gate(cfg, seed)
    items = featurize_records(records, cfg, gate_fit.model, converter)
    by_split = {name: [it for it in items if it.record.individual_id in getattr(plan, name)]
                for name in ("train", "val", "test")}
    bundle, history = fit_bundle(by_split["train"], by_split["val"], cfg, gate_fit.model, progress)
    return TrainResult(bundle, history, plan, by_split["test"], gate_fit.train_accuracy)


def fit_and_score(train_records, val_records, test_records, cfg: PipelineConfig):
    """Train on one fold and return chunk-level ``(labels, scores)`` for its test records."""
    gate = fit_gate(cfg, cfg.train.seed).model
    tr = featurize_records(train_records, cfg, gate)
    va = featurize_records(val_records, cfg, gate)
    te = featurize_records(test_records, cfg, gate)
    bundle, _ = fit_bundle(tr, va, cfg, gate)
    scored = score_items(bundle, te)
    return [c.label for c in scored], [c.score for c in scored]


# --- scoring ----------------------------------------------------------------------

def chunk_scores(bundle: ModelBundle, features: Sequence[MelFeature]) -> list[float]:
    if not features:
        return []
    std, _ = standardize(features, bundle.feature_stats)
    probs = nn.forward_batch(bundle, std)
    return [nn.positive_score(p) for p in probs]


def score_items(bundle: ModelBundle, items: Sequence[RecordFeatures]) -> list[ScoredChunk]:
    out = []
    for it in items:
        for s in chunk_scores(bundle, it.features):
            out.append(ScoredChunk(it.record.individual_id, it.record.audio_path, it.record.label == "positive", s))
    return out


def screen(bundle: ModelBundle, buffer: AudioBuffer, cfg: PipelineConfig, submission_id: str = "",
           model_version: Optional[str] = None) -> ScreeningResult:
    """Screen one recording. Silence and gate rejection give a no-cough result, not an error."""
    version = model_version or bundle_hash(bundle)
    try:
        chunks, kept, feats, report = cough_features(buffer, cfg, bundle.gate)
    except SilentAudio:
        return ScreeningResult(submission_id, 0, 0, [], None, NO_COUGH, version, reason="silent_audio")
    processing = report.to_dict()
    if not kept:
        return ScreeningResult(submission_id, len(chunks), 0, [], None, NO_COUGH, version,
                               reason="no_cough_detected", processing=processing)
    scores = chunk_scores(bundle, feats)
    positive, rec_score = nn.aggregate_recording(scores, cfg.pipeline.aggregation, bundle.decision_threshold)
    return ScreeningResult(
        submission_id, len(chunks), len(kept), scores, rec_score,
        POSITIVE_SCREEN if positive else NEGATIVE_SCREEN, version, processing=processing,
    )


def bundle_pipeline_config(bundle: ModelBundle, cfg: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Pipeline config whose feature settings match the bundle."""
    cfg = cfg or PipelineConfig()
    return cfg.replace(features=bundle.feature_config, model=bundle.config)


__all__ = [
    "ADVISORY", "ScreeningResult", "TrainResult", "PipelineConfig", "load_audio", "prepare_chunks",
    "cough_features", "fit_gate", "featurize_records", "fit_bundle", "train_pipeline", "fit_and_score",
    "chunk_scores", "score_items", "screen", "NoCoughDetected",
]
