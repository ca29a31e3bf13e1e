"""Cough-audio screening pipeline.

A recording is resampled to 16 kHz, denoised when its SNR is low, cut into
one-second chunks, gated for cough content, turned into log-Mel images and
scored by a small CNN. Scores are advisory pre-screening estimates only.
"""

from .audio_io import AudioBuffer, decode_wav, encode_wav, read_wav, write_wav
from .bundle import ModelBundle, bundle_hash, load_bundle, save_bundle
from .config import PipelineConfig, load_config
from .dsp import PreprocessConfig, preprocess
from .features import FeatureConfig, MelFeature, log_mel
from .model import ModelConfig, TrainConfig
from .pipeline import ScreeningResult, screen, train_pipeline
from .segmenter import Chunk, GateModel, chunk_audio

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "decode_wav", "encode_wav", "read_wav", "write_wav",
    "ModelBundle", "bundle_hash", "load_bundle", "save_bundle",
    "PipelineConfig", "load_config", "PreprocessConfig", "preprocess",
    "FeatureConfig", "MelFeature", "log_mel", "ModelConfig", "TrainConfig",
    "ScreeningResult", "screen", "train_pipeline", "Chunk", "GateModel", "chunk_audio",
]
