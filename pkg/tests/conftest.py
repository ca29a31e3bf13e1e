import os

import numpy as np
import pytest

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")

# filled by test_acceptance.py, printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def fixture_records():
    from coughscreen.dataset import load_manifest

    return load_manifest(os.path.join(FIXTURES, "manifest.jsonl"))


@pytest.fixture(scope="session")
def gate_model():
    from coughscreen.config import PipelineConfig
    from coughscreen.pipeline import fit_gate

    return fit_gate(PipelineConfig(), seed=0).model


@pytest.fixture(scope="session")
def desk_bundle(fixture_records, gate_model):
    """A small CNN trained for a few epochs on the 20-record fixture corpus."""
    from coughscreen.config import PipelineConfig
    from coughscreen.pipeline import featurize_records, fit_bundle

    cfg = PipelineConfig().with_values("train", epochs=4, seed=3)
    items = featurize_records(fixture_records, cfg, gate_model)
    train = [it for it in items if it.record.audio_path.endswith("a.wav")]
    val = [it for it in items if it.record.audio_path.endswith("b.wav")]
    bundle, _ = fit_bundle(train, val, cfg, gate_model)
    return bundle


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
