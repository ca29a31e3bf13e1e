"""ModelBundle and its binary file format.

Layout (all integers little-endian u32)::

    b"CGHM" | version | header_len | header (UTF-8 JSON, keys sorted)
    then, per layer in declaration order: count | count x float32 LE

The header carries the network config, feature config, feature
standardization stats, the gate and the decision threshold.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, VersionUnsupported, WeightCountMismatch
from .features import FeatureConfig
from .model import ModelConfig
from .segmenter import GateModel

MAGIC = b"CGHM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelBundle:
    config: ModelConfig
    weights: dict
    feature_stats: tuple = (0.0, 1.0)
    gate: GateModel = field(default_factory=GateModel)
    decision_threshold: float = 0.5
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValueError("decision_threshold must be in [0, 1]")
        frozen = {}
        for name, shape in self.config.param_shapes():
            if name not in self.weights:
                raise WeightCountMismatch(f"missing layer {name}")
            arr = np.array(self.weights[name], dtype=self.config.dtype)
            if arr.shape != shape:
                raise WeightCountMismatch(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite weights")
            arr.flags.writeable = False
            frozen[name] = arr
        if set(self.weights) - set(frozen):
            raise WeightCountMismatch(f"unexpected layers {sorted(set(self.weights) - set(frozen))}")
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "feature_stats", (float(self.feature_stats[0]), float(self.feature_stats[1])))

    def header(self) -> dict:
        return {
            "model": self.config.to_dict(),
            "features": {k: getattr(self.feature_config, k) for k in FeatureConfig.__dataclass_fields__},
            "feature_stats": list(self.feature_stats),
            "gate": self.gate.to_dict(),
            "decision_threshold": self.decision_threshold,
            "layers": [[name, int(np.prod(shape))] for name, shape in self.config.param_shapes()],
        }

    def __eq__(self, other):
        if not isinstance(other, ModelBundle):
            return NotImplemented
        return self.header() == other.header() and all(
            np.array_equal(self.weights[k], other.weights[k]) for k in self.weights
        )

    __hash__ = None


def dumps_bundle(bundle: ModelBundle) -> bytes:
    header = json.dumps(bundle.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    out.write(header)
    for name, _ in bundle.config.param_shapes():
        flat = np.ascontiguousarray(bundle.weights[name], dtype="<f4").ravel()
        out.write(struct.pack("<I", flat.size))
        out.write(flat.tobytes())
    return out.getvalue()


def loads_bundle(data: bytes) -> ModelBundle:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a model bundle (bad magic)")
    if len(data) < 12:
        raise WeightCountMismatch("bundle truncated inside header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"bundle format version {version} (supported: {FORMAT_VERSION})")
    if 12 + hlen > len(data):
        raise WeightCountMismatch("bundle truncated inside header")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["model"])
    pos = 12 + hlen
    weights = {}
    for name, shape in cfg.param_shapes():
        if pos + 4 > len(data):
            raise WeightCountMismatch(f"file ends before layer {name}")
        (count,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        expected = int(np.prod(shape))
        if count != expected:
            raise WeightCountMismatch(f"{name}: {count} weights stored, config needs {expected}")
        end = pos + 4 * count
        if end > len(data):
            raise WeightCountMismatch(f"{name}: truncated, {(len(data) - pos) // 4} of {count} weights present")
        weights[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape)
        pos = end
    if pos != len(data):
        raise WeightCountMismatch(f"{len(data) - pos} trailing bytes after the last layer")
    return ModelBundle(
        config=cfg,
        weights=weights,
        feature_stats=tuple(header["feature_stats"]),
        gate=GateModel.from_dict(header["gate"]),
        decision_threshold=header["decision_threshold"],
        feature_config=FeatureConfig(**header["features"]),
        format_version=version,
    )


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write atomically (temp file + rename)."""
    data = dumps_bundle(bundle)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".bundle-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as f:
        return loads_bundle(f.read())


def bundle_hash(bundle_or_bytes) -> str:
    """SHA-256 of the serialized bundle; used as the model version string."""
    data = bundle_or_bytes if isinstance(bundle_or_bytes, (bytes, bytearray)) else dumps_bundle(bundle_or_bytes)
    return hashlib.sha256(data).hexdigest()
