import struct

import numpy as np
import pytest

from coughscreen.bundle import MAGIC, ModelBundle, bundle_hash, dumps_bundle, load_bundle, loads_bundle, save_bundle
from coughscreen.errors import BadMagic, VersionUnsupported, WeightCountMismatch
from coughscreen.features import FeatureConfig
from coughscreen.model import ModelConfig, init_params
from coughscreen.segmenter import GateModel

CFG = ModelConfig(conv_channels=(3, 4), hidden_units=5, input_shape=(16, 20, 1))


def random_bundle(seed=0, **kw):
    rng = np.random.default_rng(seed)
    w = {k: rng.normal(size=v.shape) for k, v in init_params(CFG).items()}
    gate = GateModel(tuple(rng.normal(size=7)), decision_threshold=0.4)
    return ModelBundle(CFG, w, feature_stats=(-7.25, 3.5), gate=gate, decision_threshold=0.45,
                       feature_config=FeatureConfig(n_mels=16), **kw)


def test_layout_oracle():
    b = random_bundle()
    raw = dumps_bundle(b)
    assert raw[:4] == MAGIC
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    pos = 12 + hlen
    for name, shape in CFG.param_shapes():
        (count,) = struct.unpack("<I", raw[pos:pos + 4])
        assert count == np.prod(shape)
        stored = np.frombuffer(raw[pos + 4:pos + 4 + 4 * count], "<f4")
        np.testing.assert_array_equal(stored, b.weights[name].astype(np.float32).ravel())
        pos += 4 + 4 * count
    assert pos == len(raw)


def test_round_trip_byte_identical(tmp_path):
    for seed in range(5):
        b = random_bundle(seed)
        p = tmp_path / f"b{seed}.cghm"
        save_bundle(b, p)
        back = load_bundle(p)
        assert back == b
        assert dumps_bundle(back) == p.read_bytes()
        assert back.gate == b.gate and back.feature_stats == b.feature_stats
        assert back.feature_config == b.feature_config and back.decision_threshold == 0.45


def test_weights_are_read_only():
    b = random_bundle()
    with pytest.raises(ValueError):
        b.weights["fc2.bias"][0] = 1.0


def test_truncation_detected():
    raw = dumps_bundle(random_bundle())
    for cut in (len(raw) - 1, len(raw) - 4, len(raw) // 2, 20, 11):
        with pytest.raises(WeightCountMismatch):
            loads_bundle(raw[:cut])
    with pytest.raises(WeightCountMismatch):
        loads_bundle(raw + b"\x00")


def test_bad_magic_and_version():
    raw = dumps_bundle(random_bundle())
    with pytest.raises(BadMagic):
        loads_bundle(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        loads_bundle(b"")
    with pytest.raises(VersionUnsupported):
        loads_bundle(raw[:4] + struct.pack("<I", 99) + raw[8:])


def test_invariants():
    w = init_params(CFG)
    w.pop("fc2.bias")
    with pytest.raises(WeightCountMismatch):
        ModelBundle(CFG, w)
    w = init_params(CFG)
    w["fc1.bias"] = np.zeros(6)
    with pytest.raises(WeightCountMismatch):
        ModelBundle(CFG, w)
    w = init_params(CFG)
    w["fc1.bias"][0] = np.inf
    with pytest.raises(ValueError):
        ModelBundle(CFG, w)
    with pytest.raises(ValueError):
        ModelBundle(CFG, init_params(CFG), decision_threshold=1.5)


def test_hash_tracks_content():
    a, b = random_bundle(0), random_bundle(1)
    assert bundle_hash(a) == bundle_hash(dumps_bundle(a))
    assert bundle_hash(a) != bundle_hash(b)
    assert len(bundle_hash(a)) == 64


def test_failed_save_keeps_previous_file(tmp_path, monkeypatch):
    p = tmp_path / "b.cghm"
    save_bundle(random_bundle(0), p)
    before = p.read_bytes()

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr("os.fsync", boom)
    with pytest.raises(OSError):
        save_bundle(random_bundle(1), p)
    assert p.read_bytes() == before
    assert sorted(x.name for x in tmp_path.iterdir()) == ["b.cghm"]
