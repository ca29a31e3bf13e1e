"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary) and then
asserts. Tolerances and budgets are the contract's; do not loosen them here.
"""

import contextlib
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

import conftest
from coughscreen.audio_io import AudioBuffer
from coughscreen.bundle import bundle_hash, dumps_bundle, load_bundle, loads_bundle, save_bundle
from coughscreen.cli import main
from coughscreen.dsp import resample
from coughscreen.evaluation import confusion, implied_precision, metrics, roc_auc
from coughscreen.features import FeatureConfig, analysis_window, mel_centers_hz, onesided_energy, stft_power
from coughscreen.segmenter import CHUNK_LEN, chunk_audio, gate_score, train_gate
from coughscreen.service import ScreeningService, ServiceSettings, create_app, verify_log
from coughscreen.service.store import RecordLog
from coughscreen.synth import gate_corpus

from crash import DIGEST, bundle_kill_cycles, log_kill_cycles
from live import live_server
from test_evaluation import concordance, naive_counts
from test_features import htk_mel, naive_dft
from test_model import finite_difference_check

META = json.dumps({"consent": True, "triage": {"symptomatic_now": True}})

# Optimizer settings for the 70-epoch run: larger batches and AMSGrad give the
# smoothest loss curve found; the loss is measured over the full training split
# after each epoch.
E2E_INI = """\
[train]
batch_size = 128
learning_rate = 0.002
amsgrad = true
train_loss_mode = epoch_end
"""


@contextlib.contextmanager
def criterion(name, budget_s=None):
    """Time the body; record PASS only if it finished inside the budget with every check true."""
    state = {"checks": [], "notes": []}
    t0 = time.perf_counter()
    try:
        yield state
    except BaseException as exc:
        conftest.ACCEPTANCE[name] = (False, f"{type(exc).__name__}: {exc}"[:300])
        raise
    elapsed = time.perf_counter() - t0
    failed = [label for label, ok in state["checks"] if not ok]
    if budget_s is not None and elapsed >= budget_s:
        failed.append(f"runtime {elapsed:.0f}s >= {budget_s}s")
    detail = "; ".join(state["notes"] + [f"{elapsed:.1f}s"])
    if failed:
        detail = "failed: " + ", ".join(failed) + " | " + detail
    conftest.ACCEPTANCE[name] = (not failed, detail)
    assert not failed, detail


def check(state, label, ok, note=None):
    state["checks"].append((label, bool(ok)))
    if note:
        state["notes"].append(note)


def sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def tree_hash(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode() + b"\0")
        with open(os.path.join(path, name), "rb") as f:
            h.update(f.read())
    return h.hexdigest()


# ----------------------------------------------------------------------------------------------

def test_dsp_oracle_suite():
    with criterion("DSP oracle suite", budget_s=30) as st:
        cfg = FeatureConfig()
        rng = np.random.default_rng(2024)
        win = analysis_window(cfg.frame_len)
        worst_dft = worst_parseval = 0.0
        frames = 0
        while frames < 200:
            x = rng.normal(size=16000)
            power = stft_power(x, cfg)
            energy = onesided_energy(power, cfg.fft_size)
            for i in rng.choice(power.shape[1], size=50, replace=False):
                frame = x[i * cfg.hop:i * cfg.hop + cfg.frame_len] * win
                ref = np.abs(naive_dft(frame, cfg.fft_size)) ** 2
                worst_dft = max(worst_dft, np.max(np.abs(power[:, i] - ref)) / np.max(ref))
                worst_parseval = max(worst_parseval, abs(energy[i] - np.sum(frame**2)) / np.sum(frame**2))
                frames += 1
        check(st, "dft", worst_dft <= 1e-6, f"DFT rel err {worst_dft:.1e} over {frames} frames")
        check(st, "parseval", worst_parseval <= 1e-6, f"Parseval rel err {worst_parseval:.1e}")

        t = np.arange(48000) / 48000
        out = resample(AudioBuffer(0.5 * np.sin(2 * np.pi * 440 * t), 48000), 16000)
        peak = int(np.argmax(np.abs(np.fft.rfft(out.samples))))  # 1 Hz bins
        check(st, "resample", abs(peak - 440) <= 1, f"440 Hz tone peak at bin {peak}")

        worst_mel = 0.0
        for c in (cfg, FeatureConfig(fmin_hz=300, fmax_hz=7000), FeatureConfig(n_mels=40, n_mfcc=13)):
            mels = [htk_mel(f) for f in mel_centers_hz(c)]
            edges = np.linspace(htk_mel(c.fmin_hz), htk_mel(c.fmax_hz), c.n_mels + 2)
            worst_mel = max(worst_mel, float(np.max(np.abs(np.array(mels) - edges[1:-1]))))
        check(st, "mel", worst_mel <= 1e-9, f"Mel spacing err {worst_mel:.1e}")


def test_gradient_check():
    with criterion("Gradient check", budget_s=60) as st:
        worst = max(finite_difference_check("float32", 1e-3, seed) for seed in range(3))
        check(st, "rel err", worst <= 1e-2, f"max rel err {worst:.2e} (float32, 8x8 input, every coordinate)")


def test_gate_accuracy():
    with criterion("Gate accuracy", budget_s=120) as st:
        corpus = gate_corpus(500, seed=0)
        check(st, "balanced", sum(y for _, y in corpus) == 250)
        fit = train_gate(corpus[:400])
        held = corpus[400:]
        acc = float(np.mean([(gate_score(c, fit.model) >= 0.5) == y for c, y in held]))
        check(st, "held-out", acc >= 0.97, f"held-out accuracy {acc:.3f} on {len(held)} chunks")


@pytest.mark.slow
def test_end_to_end_learnability(tmp_path, capsys):
    with criterion("End-to-end learnability", budget_s=15 * 60) as st:
        corpus = tmp_path / "corpus"
        assert main(["synth", "--out", str(corpus), "--n", "400"]) == 0
        bundle = tmp_path / "model.cghm"
        ini = tmp_path / "e2e.ini"
        ini.write_text(E2E_INI)
        assert main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(bundle),
                     "--config", str(ini), "--seed", "7"]) == 0
        split = json.load(open(str(bundle) + ".split.json"))
        check(st, "split", [len(split[k]) for k in ("train", "val", "test")] == [160, 20, 20])
        capsys.readouterr()
        assert main(["eval", "--manifest", str(bundle) + ".test.jsonl", "--bundle", str(bundle),
                     "--level", "file", "--out", str(tmp_path / "eval")]) == 0
        rep = json.loads(capsys.readouterr().out)
        check(st, "accuracy", rep["accuracy"] >= 0.95, f"test accuracy {rep['accuracy']:.3f}")
        check(st, "auc", rep["auc"] >= 0.98, f"AUC {rep['auc']:.4f} over {rep['n_samples']} recordings")

        rows = list(csv.DictReader(open(str(bundle) + ".history.csv")))
        check(st, "history", len(rows) == 70, f"{len(rows)} history rows")
        loss = np.array([float(r["train_loss"]) for r in rows])
        ma = np.convolve(loss, np.ones(5) / 5, mode="valid")
        rises = np.diff(ma)
        check(st, "monotone", np.all(rises <= 0),
              f"5-epoch MA rises {int(np.sum(rises > 0))} times (max {max(0.0, float(rises.max())):.1e})")


def test_metric_identities():
    with criterion("Metric identities") as st:
        rng = np.random.default_rng(7)
        worst = 0.0
        suites = 0
        for _ in range(300):
            n = int(rng.integers(2, 201))
            y = rng.random(n) < rng.uniform(0.1, 0.9)
            if y.all() or not y.any():
                continue
            # half the suites use coarse scores to force ties
            s = rng.random(n) if suites % 2 else np.round(rng.random(n), 1)
            worst = max(worst, abs(roc_auc(y, s)[1] - concordance(y, s)))
            suites += 1
        check(st, "auc", worst <= 1e-12, f"AUC vs concordance {worst:.1e} on {suites} suites")

        p = implied_precision(0.89, 0.87)
        check(st, "triple", abs(p - 0.8509) <= 0.005, f"implied precision {p:.4f}")

        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(1, 120))
            y = rng.random(n) < rng.random()
            pr = rng.random(n) < rng.random()
            m = confusion(y, pr)
            tp, fp, tn, fn = naive_counts(y, pr)
            r = metrics(m)
            ok = (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
            ok &= math.isclose(r["accuracy"], (tp + tn) / n, rel_tol=1e-12)
            ok &= r["sensitivity"] == (tp / (tp + fn) if tp + fn else None)
            ok &= r["specificity"] == (tn / (tn + fp) if tn + fp else None)
            ok &= r["precision"] == (tp / (tp + fp) if tp + fp else None)
            ok &= (r["f1"] is None) if tp == 0 else math.isclose(r["f1"], 2 * tp / (2 * tp + fp + fn), rel_tol=1e-12)
            mismatches += not ok
        check(st, "confusion", mismatches == 0, f"{mismatches}/1000 matrices mismatched")


def test_determinism(tmp_path, capsys):
    with criterion("Determinism") as st:
        corpora = []
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--n", "40", "--seed", "5"]) == 0
            corpora.append(tree_hash(tmp_path / name))
        check(st, "corpus", corpora[0] == corpora[1], "corpora identical" if corpora[0] == corpora[1] else None)

        manifest = str(tmp_path / "a" / "manifest.jsonl")
        for name in ("m1", "m2"):
            assert main(["train", "--manifest", manifest, "--out", str(tmp_path / f"{name}.cghm"),
                         "--epochs", "3", "--seed", "7"]) == 0
        same_bundle = sha(tmp_path / "m1.cghm") == sha(tmp_path / "m2.cghm")
        same_hist = sha(tmp_path / "m1.cghm.history.csv") == sha(tmp_path / "m2.cghm.history.csv")
        check(st, "bundle", same_bundle, "bundles identical" if same_bundle else None)
        check(st, "history", same_hist, "histories identical" if same_hist else None)
        capsys.readouterr()


def test_chunking_exactness():
    with criterion("Chunking exactness") as st:
        rng = np.random.default_rng(1000)
        bad = 0
        for n in rng.integers(1, 6 * CHUNK_LEN, size=1000):
            n = int(n)
            x = rng.uniform(-1, 1, n)
            chunks = chunk_audio(AudioBuffer(x, 16000))
            full, rem = divmod(n, CHUNK_LEN)
            # a tail is kept unless padding would exceed 95% of the chunk
            keep = rem > 0 and CHUNK_LEN - rem < 0.95 * CHUNK_LEN
            pads = [c.padded_samples for c in chunks]
            recon = np.concatenate([c.content for c in chunks]) if chunks else np.zeros(0)
            covered = full * CHUNK_LEN + (rem if keep else 0)
            ok = len(chunks) == full + keep
            ok &= pads == [0] * full + ([CHUNK_LEN - rem] if keep else [])
            ok &= all(c.samples.shape == (CHUNK_LEN,) for c in chunks)
            ok &= np.array_equal(recon, x[:covered])
            bad += not ok
        check(st, "exact", bad == 0, f"{bad}/1000 durations mismatched")


@pytest.mark.skipif(not hasattr(os, "fork"), reason="needs fork")
def test_serialization(tmp_path, desk_bundle):
    with criterion("Serialization") as st:
        log_problems = log_kill_cycles(tmp_path / "kill.cglg", iterations=100, seed=0)
        n_records = verify_log(tmp_path / "kill.cglg")
        check(st, "log kill", not log_problems,
              f"log: {len(log_problems)} problems over 100 kills, {n_records} records intact")
        bundle_problems = bundle_kill_cycles(tmp_path / "kill.cghm", iterations=100, seed=0)
        check(st, "bundle kill", not bundle_problems, f"bundle: {len(bundle_problems)} problems over 100 kills")

        raw = dumps_bundle(desk_bundle)
        save_bundle(desk_bundle, tmp_path / "b.cghm")
        again = load_bundle(tmp_path / "b.cghm")
        check(st, "bundle bytes", raw == (tmp_path / "b.cghm").read_bytes() == dumps_bundle(again)
              == dumps_bundle(loads_bundle(raw)))
        check(st, "bundle hash", bundle_hash(again) == bundle_hash(desk_bundle))

        with RecordLog(tmp_path / "r.cglg") as log:
            for i in range(10):
                log.append({"submission_id": f"r{i}", "i": i}, DIGEST)
        before = (tmp_path / "r.cglg").read_bytes()
        with RecordLog(tmp_path / "r.cglg") as log:
            payloads = [r.payload for r in log]
        check(st, "log bytes", (tmp_path / "r.cglg").read_bytes() == before
              and payloads == [{"submission_id": f"r{i}", "i": i} for i in range(10)])


def test_service_contract(tmp_path, desk_bundle, fixtures_dir):
    with criterion("Service contract", budget_s=120) as st:
        with open(os.path.join(fixtures_dir, "audio", "p07a.wav"), "rb") as f:
            cough = f.read()
        with open(os.path.join(fixtures_dir, "silence.wav"), "rb") as f:
            silence = f.read()
        service = ScreeningService(ServiceSettings(data_dir=str(tmp_path / "data")), desk_bundle)
        client = TestClient(create_app(service))

        def post(wav, meta=META):
            return client.post("/v1/submissions", files={"audio": ("a.wav", wav, "audio/wav")},
                               data={"metadata": meta})

        r = post(cough, json.dumps({"consent": False}))
        check(st, "consent", r.status_code == 400 and len(service.log) == 0
              and os.listdir(service.audio.root) == [], f"consent=false -> {r.status_code}")

        r = post(cough)
        body = r.json()
        fields = {"submission_id", "n_chunks_total", "n_chunks_cough", "chunk_scores", "recording_score",
                  "label", "model_version", "advisory"}
        check(st, "valid", r.status_code == 201 and fields <= set(body), f"valid -> {r.status_code}")
        got = client.get(f"/v1/submissions/{body['submission_id']}")
        check(st, "get", got.status_code == 200 and got.json()["result"] == body)

        r = post(silence)
        check(st, "silence", r.status_code == 422 and r.json()["label"] == "no_cough_detected",
              f"silence -> {r.status_code}")
        check(st, "health", client.get("/v1/health").json()["status"] == "ok")

        burst = ScreeningService(ServiceSettings(data_dir=str(tmp_path / "burst")), desk_bundle)
        with live_server(create_app(burst)) as url, httpx.Client(base_url=url, timeout=120) as http:
            def submit(_):
                return http.post("/v1/submissions", files={"audio": ("a.wav", cough, "audio/wav")},
                                 data={"metadata": META})

            with ThreadPoolExecutor(16) as pool:
                responses = list(pool.map(submit, range(50)))
            ids = {x.json()["submission_id"] for x in responses if x.status_code == 201}
            listed = http.get("/v1/submissions").json()["count"]
        burst.log.close()
        n = verify_log(burst.log.path)
        check(st, "burst", len(ids) == 50 and listed == 50 and n == 50,
              f"{len(ids)}/50 concurrent submissions acknowledged, {n} records verified")
