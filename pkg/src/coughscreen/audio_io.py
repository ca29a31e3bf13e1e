"""Uncompressed WAV decode/encode and an external-converter hook.

Decoding accepts PCM 8/16/24/32-bit and IEEE float 32-bit (also when
wrapped in WAVE_FORMAT_EXTENSIBLE), any channel count. Output is always a
mono float64 buffer in [-1, 1]. The writer emits 16-bit PCM mono only.
"""

from __future__ import annotations

import io
import os
import shlex
import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import BinaryIO, Union

import numpy as np

from .errors import ConverterFailed, ConverterMissing, IoFailure, NotWav, TruncatedFile, UnsupportedEncoding

PCM = 1
IEEE_FLOAT = 3
EXTENSIBLE = 0xFFFE

PathOrFile = Union[str, os.PathLike, BinaryIO]


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""
    clipped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.size < 1:
            raise ValueError("audio buffer must hold at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def __len__(self):
        return self.samples.size


def _read_bytes(src: PathOrFile) -> tuple[bytes, str]:
    if hasattr(src, "read"):
        return src.read(), getattr(src, "name", "<stream>")
    with open(src, "rb") as f:
        return f.read(), os.fspath(src)


def decode_wav(data: bytes, source_id: str = "") -> AudioBuffer:
    """Decode WAV bytes; see :func:`read_wav`."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotWav(f"{source_id or 'input'}: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body_start = pos + 8
        if cid == b"fmt ":
            if body_start + 16 > len(data):
                raise TruncatedFile("fmt chunk truncated")
            fmt = data[body_start:body_start + size]
        elif cid == b"data":
            if body_start + size > len(data):
                raise TruncatedFile(
                    f"{source_id or 'input'}: data chunk claims {size} bytes, {len(data) - body_start} present"
                )
            payload = data[body_start:body_start + size]
            break
        # LIST/INFO and anything else are skipped
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise NotWav("no fmt chunk")
    if payload is None:
        raise TruncatedFile("no data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels < 1 or rate < 1:
        raise NotWav("invalid channel count or sample rate")

    if tag == PCM and bits in (8, 16, 24, 32):
        width = bits // 8
        usable = len(payload) - len(payload) % (width * channels)
        raw = np.frombuffer(payload[:usable], dtype=np.uint8)
        if bits == 8:
            ints = raw.astype(np.int64) - 128
            full = 128.0
        elif bits == 16:
            ints = raw.view("<i2").astype(np.int64)
            full = 32768.0
        elif bits == 24:
            b = raw.reshape(-1, 3).astype(np.int64)
            ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
            full = float(1 << 23)
        else:
            ints = raw.view("<i4").astype(np.int64)
            full = float(1 << 31)
        values = ints / full
    elif tag == IEEE_FLOAT and bits == 32:
        usable = len(payload) - len(payload) % (4 * channels)
        values = np.frombuffer(payload[:usable], dtype="<f4").astype(np.float64)
    elif tag == IEEE_FLOAT and bits == 64:
        usable = len(payload) - len(payload) % (8 * channels)
        values = np.frombuffer(payload[:usable], dtype="<f8").astype(np.float64)
    else:
        raise UnsupportedEncoding(f"format tag {tag} with {bits} bits is not supported")

    frames = values.reshape(-1, channels)
    if frames.shape[0] == 0:
        raise TruncatedFile("data chunk holds no complete frame")
    mono = frames.mean(axis=1)
    bad = ~np.isfinite(mono)
    if bad.any():
        mono = np.where(bad, 0.0, mono)
    clipped = int(np.count_nonzero(np.abs(mono) > 1.0))
    if clipped:
        mono = np.clip(mono, -1.0, 1.0)
    return AudioBuffer(mono, int(rate), source_id, clipped=clipped)


def read_wav(path: PathOrFile) -> AudioBuffer:
    """Read a WAV file into a mono buffer.

    Integer samples are divided by the magnitude of the type's minimum
    (e.g. 32768 for 16-bit). Channels are averaged. Out-of-range float
    samples are clipped and counted in ``AudioBuffer.clipped``.

    Raises:
        NotWav: bad RIFF/WAVE magic or missing fmt chunk.
        UnsupportedEncoding: compressed or unknown sample formats.
        TruncatedFile: data chunk shorter than its header claims.
    """
    data, name = _read_bytes(path)
    return decode_wav(data, source_id=name)


def encode_wav(buffer: AudioBuffer, bit_depth: int = 16) -> bytes:
    if bit_depth != 16:
        raise ValueError("only 16-bit output is supported")
    # same 32768 scale as the decoder, so a round trip is off by at most half an LSB
    # (one LSB at +1.0, where 32768 clamps to 32767)
    q = np.clip(np.round(np.clip(buffer.samples, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    body = q.tobytes()
    rate = int(buffer.sample_rate_hz)
    out = io.BytesIO()
    out.write(b"RIFF")
    out.write(struct.pack("<I", 36 + len(body)))
    out.write(b"WAVE")
    out.write(b"fmt ")
    out.write(struct.pack("<IHHIIHH", 16, PCM, 1, rate, rate * 2, 2, 16))
    out.write(b"data")
    out.write(struct.pack("<I", len(body)))
    out.write(body)
    return out.getvalue()


def write_wav(buffer: AudioBuffer, path: PathOrFile, bit_depth: int = 16) -> None:
    """Write 16-bit little-endian PCM mono.

    Samples are clamped to [-1, 1], scaled by 32768, rounded and clamped to
    the int16 range, so 1.0 is stored as 32767.
    """
    blob = encode_wav(buffer, bit_depth)
    try:
        if hasattr(path, "write"):
            path.write(blob)
        else:
            with open(path, "wb") as f:
                f.write(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def convert_external(path, converter_command: str | None = None) -> str:
    """Run an external converter producing a WAV temp file.

    ``converter_command`` is a template with ``{in}`` and ``{out}``
    placeholders, e.g. ``"ffmpeg -y -loglevel error -i {in} {out}"``. When
    omitted, ``$COUGH_CONVERTER`` is used. The caller owns the returned file.
    """
    template = converter_command or os.environ.get("COUGH_CONVERTER")
    if not template:
        raise ConverterMissing("no converter configured (set COUGH_CONVERTER)")
    if "{in}" not in template or "{out}" not in template:
        raise ValueError("converter template needs {in} and {out} placeholders")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fd, out = tempfile.mkstemp(suffix=".wav")
    os.close(fd)
    argv = [a.replace("{in}", os.fspath(path)).replace("{out}", out) for a in shlex.split(template)]
    if shutil.which(argv[0]) is None:
        os.unlink(out)
        raise ConverterMissing(f"converter binary {argv[0]!r} not found")
    proc = subprocess.run(argv, capture_output=True)
    if proc.returncode != 0:
        os.unlink(out)
        raise ConverterFailed(
            f"{argv[0]} exited with {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}"
        )
    return out
