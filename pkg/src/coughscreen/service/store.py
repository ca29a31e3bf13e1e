"""Append-only record log and content-addressed audio store.

Log file layout (little-endian)::

    b"CGLG" | u32 version
    record*: u32 payload_len | u32 crc32 | payload (JSON, UTF-8) | 32-byte SHA-256 of the audio

The CRC covers the payload and the audio digest. A record is written with a
single ``write`` on an append-mode descriptor and fsynced before it is
acknowledged. On reopen, an incomplete or corrupt final frame (a torn write)
is truncated away; damage followed by valid frames is reported as
corruption instead of being silently dropped.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional

LOG_MAGIC = b"CGLG"
LOG_VERSION = 1
FILE_HEADER = LOG_MAGIC + struct.pack("<I", LOG_VERSION)
FRAME_HEAD = struct.Struct("<II")
DIGEST_LEN = 32
MAX_PAYLOAD = 16 * 1024 * 1024


class LogCorrupt(Exception):
    """The log has a damaged frame that is not a torn tail."""


@dataclass(frozen=True)
class LogRecord:
    seq: int
    offset: int
    payload: dict
    audio_sha256: str


def encode_frame(payload: dict, audio_sha256: str) -> bytes:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = bytes.fromhex(audio_sha256)
    if len(digest) != DIGEST_LEN:
        raise ValueError("audio hash must be a SHA-256 hex digest")
    if len(body) > MAX_PAYLOAD:
        raise ValueError("record payload too large")
    crc = zlib.crc32(body + digest) & 0xFFFFFFFF
    return FRAME_HEAD.pack(len(body), crc) + body + digest


def scan_frames(data: bytes) -> tuple[list[tuple[int, dict, str]], int]:
    """Parse frames after the file header.

    Returns ``([(offset, payload, audio_hash), ...], end_of_last_good_frame)``.
    Raises LogCorrupt when a bad frame is followed by more bytes that parse
    as a valid frame (that cannot be a torn append).
    """
    if data[:4] != LOG_MAGIC:
        raise LogCorrupt("bad log magic")
    if len(data) < len(FILE_HEADER):
        raise LogCorrupt("log header truncated")
    (version,) = struct.unpack("<I", data[4:8])
    if version != LOG_VERSION:
        raise LogCorrupt(f"unsupported log version {version}")
    pos = len(FILE_HEADER)
    out = []
    while pos < len(data):
        frame = _parse_frame(data, pos)
        if frame is None:
            if _any_valid_frame_after(data, pos + 1):
                raise LogCorrupt(f"damaged record at offset {pos}")
            break
        payload, digest, end = frame
        out.append((pos, payload, digest))
        pos = end
    return out, pos


def _parse_frame(data: bytes, pos: int):
    if pos + FRAME_HEAD.size > len(data):
        return None
    length, crc = FRAME_HEAD.unpack_from(data, pos)
    if length > MAX_PAYLOAD:
        return None
    start = pos + FRAME_HEAD.size
    end = start + length + DIGEST_LEN
    if end > len(data):
        return None
    blob = data[start:end]
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        return None
    try:
        payload = json.loads(blob[:length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    return payload, blob[length:].hex(), end


def _any_valid_frame_after(data: bytes, start: int) -> bool:
    # a torn tail holds at most one partial frame; look for a complete one past it
    for pos in range(start, len(data) - FRAME_HEAD.size):
        if _parse_frame(data, pos) is not None:
            return True
    return False


class RecordLog:
    """Single-writer append log with an in-memory index.

    Appends are serialized by a lock and acknowledged in log order. Readers
    use the current immutable snapshot without locking.
    """

    def __init__(self, path, fsync: bool = True):
        self.path = os.fspath(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self.truncated_bytes = 0
        records = self._recover()
        self._records: tuple = tuple(records)
        self._by_id = {r.payload.get("submission_id"): r for r in records}
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)

    def _recover(self) -> list[LogRecord]:
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
            try:
                os.write(fd, FILE_HEADER)
                os.fsync(fd)
            finally:
                os.close(fd)
            return []
        with open(self.path, "rb") as f:
            data = f.read()
        if len(data) < len(FILE_HEADER) and FILE_HEADER.startswith(data):
            # crashed while writing the header of a fresh log
            with open(self.path, "wb") as f:
                f.write(FILE_HEADER)
                f.flush()
                os.fsync(f.fileno())
            self.truncated_bytes = len(data)
            return []
        frames, good_end = scan_frames(data)
        if good_end < len(data):
            self.truncated_bytes = len(data) - good_end
            with open(self.path, "r+b") as f:
                f.truncate(good_end)
                f.flush()
                os.fsync(f.fileno())
        return [LogRecord(i + 1, off, payload, digest) for i, (off, payload, digest) in enumerate(frames)]

    def append(self, payload: dict, audio_sha256: str) -> LogRecord:
        frame = encode_frame(payload, audio_sha256)
        with self._lock:
            offset = os.lseek(self._fd, 0, os.SEEK_END)
            written = os.write(self._fd, frame)
            if written != len(frame):
                # roll back a short write so the log stays parseable
                os.ftruncate(self._fd, offset)
                raise OSError("short write to record log")
            if self.fsync:
                os.fsync(self._fd)
            rec = LogRecord(len(self._records) + 1, offset, payload, audio_sha256)
            by_id = dict(self._by_id)
            by_id[payload.get("submission_id")] = rec
            self._records = self._records + (rec,)
            self._by_id = by_id
        return rec

    def get(self, submission_id: str) -> Optional[LogRecord]:
        return self._by_id.get(submission_id)

    def records(self) -> tuple:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[LogRecord]:
        return iter(self._records)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def verify_log(path) -> int:
    """Integrity scan: every byte after the header belongs to a valid frame.

    Returns the record count; raises LogCorrupt otherwise.
    """
    with open(path, "rb") as f:
        data = f.read()
    frames, end = scan_frames(data)
    if end != len(data):
        raise LogCorrupt(f"{len(data) - end} trailing bytes after the last valid record")
    return len(frames)


class AudioStore:
    """Audio files named by the SHA-256 of their bytes; duplicates share one file."""

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)

    def path_for(self, digest: str) -> str:
        return os.path.join(self.root, digest + ".wav")

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.path_for(digest)
        if os.path.exists(path):
            return digest
        tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        return digest

    def get(self, digest: str) -> bytes:
        with open(self.path_for(digest), "rb") as f:
            return f.read()

    def __contains__(self, digest: str) -> bool:
        return os.path.exists(self.path_for(digest))
