"""Service round trip without a network socket.

Trains a throwaway model, mounts the HTTP app in-process, submits a cough
recording and a silent one, then reads the stored records back and checks
the append-only log.

    python3 demos/service_roundtrip.py
"""

import json
import os
import tempfile

import warnings

import numpy as np
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # starlette nags about its httpx backend
    from fastapi.testclient import TestClient

from coughscreen.audio_io import AudioBuffer, encode_wav
from coughscreen.config import PipelineConfig
from coughscreen.dataset import load_manifest
from coughscreen.pipeline import train_pipeline
from coughscreen.service import ScreeningService, ServiceSettings, create_app, verify_log
from coughscreen.synth import cough_recording, synth_corpus

work = tempfile.mkdtemp(prefix="coughscreen-svc-")
records = load_manifest(synth_corpus(os.path.join(work, "corpus"), 120, seed=1))
cfg = PipelineConfig().with_values("train", epochs=15, batch_size=16, learning_rate=2e-3, seed=1)
result = train_pipeline(records, cfg)
print("trained; validation accuracy by epoch:", [round(e.val_accuracy, 2) for e in result.history.epochs])

service = ScreeningService(ServiceSettings(data_dir=os.path.join(work, "data")), result.bundle)
client = TestClient(create_app(service))
meta = json.dumps({"consent": True, "triage": {"symptomatic_now": False}})

rng = np.random.default_rng(3)
cough = encode_wav(AudioBuffer(cough_recording(rng, positive=True), 16000))
silence = encode_wav(AudioBuffer(np.zeros(32000), 16000))

for name, wav in (("cough", cough), ("silence", silence)):
    r = client.post("/v1/submissions", files={"audio": (f"{name}.wav", wav, "audio/wav")}, data={"metadata": meta})
    body = r.json()
    print(f"{name}: HTTP {r.status_code} label={body['label']} score={body['recording_score']}")

# no consent: rejected and not stored
r = client.post("/v1/submissions", files={"audio": ("c.wav", cough, "audio/wav")},
                data={"metadata": json.dumps({"consent": False})})
print("without consent:", r.status_code, r.json()["error"])

listing = client.get("/v1/submissions").json()
print("stored submissions:", listing["count"])
service.log.close()
print("log frames verified:", verify_log(service.log.path))
