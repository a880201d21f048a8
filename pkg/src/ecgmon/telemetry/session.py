"""Per-session append-only frame logs and their reassembly into traces.

A log ``<session_id>.eclog`` holds raw frames, each preceded by its length
as a little-endian u32, in arrival order. The sidecar
``<session_id>.index.json`` records received sequence ranges and gaps.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EmptySession, FormatError
from ..signal import EcgRecord
from .frame import TelemetryFrame, decode_frame
from .simulator import dequantize

LENGTH = struct.Struct("<I")


def seq_ranges(seqs) -> list[list[int]]:
    """Collapse sorted unique integers into inclusive ``[start, end]`` runs."""
    out: list[list[int]] = []
    for s in sorted(set(seqs)):
        if out and s == out[-1][1] + 1:
            out[-1][1] = s
        else:
            out.append([s, s])
    return out


class DeviceSession:
    """State for one (device, session) pair; methods are thread-safe."""

    def __init__(self, device_id: bytes, session_id: bytes, storage_dir: Path):
        self.device_id = device_id
        self.session_id = session_id
        self.persisted_path = Path(storage_dir) / f"{session_id.hex()}.eclog"
        self.index_path = Path(storage_dir) / f"{session_id.hex()}.index.json"
        self._lock = threading.Lock()
        self._received: set[int] = set()
        self._fh = open(self.persisted_path, "ab")
        self.frames_logged = 0
        self.duplicates = 0
        self.ended = False
        self.sample_rate_hz: int | None = None

    @property
    def next_expected_seq(self) -> int:
        with self._lock:
            return max(self._received) + 1 if self._received else 0

    def received_ranges(self) -> list[list[int]]:
        with self._lock:
            return seq_ranges(self._received)

    def gap_list(self) -> list[int]:
        with self._lock:
            if not self._received:
                return []
            top = max(self._received)
            return [s for s in range(top + 1) if s not in self._received]

    def append(self, frame: TelemetryFrame, raw: bytes) -> None:
        with self._lock:
            self._fh.write(LENGTH.pack(len(raw)) + raw)
            self._fh.flush()
            self.frames_logged += 1
            if frame.sequence_number in self._received:
                self.duplicates += 1
            self._received.add(frame.sequence_number)
            self.sample_rate_hz = frame.sample_rate_hz
            if frame.end_of_session:
                self.ended = True
        if frame.end_of_session:
            self.write_index()

    def write_index(self) -> None:
        ranges = self.received_ranges()
        gaps = self.gap_list()
        with self._lock:
            doc = {
                "device_id": self.device_id.hex(),
                "session_id": self.session_id.hex(),
                "log": self.persisted_path.name,
                "frames_logged": self.frames_logged,
                "duplicates": self.duplicates,
                "ended": self.ended,
                "sample_rate_hz": self.sample_rate_hz,
                "seq_ranges": ranges,
                "gaps": gaps,
            }
            tmp = self.index_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc, indent=2) + "\n")
            os.replace(tmp, self.index_path)

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
        self.write_index()


def read_log(path) -> list[tuple[TelemetryFrame, bytes]]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if pos + LENGTH.size > len(data):
            raise FormatError(f"truncated length prefix at byte {pos}")
        (n,) = LENGTH.unpack_from(data, pos)
        pos += LENGTH.size
        raw = data[pos: pos + n]
        if len(raw) != n:
            raise FormatError(f"truncated frame at byte {pos}")
        out.append((decode_frame(raw), raw))
        pos += n
    return out


@dataclass
class GapReport:
    missing_seqs: list[int] = field(default_factory=list)
    missing_sample_ranges: list[tuple[int, int]] = field(default_factory=list)
    nominal_chunk: int = 0
    frames: int = 0

    def to_dict(self) -> dict:
        return {
            "missing_seqs": self.missing_seqs,
            "missing_sample_ranges": [list(r) for r in self.missing_sample_ranges],
            "nominal_chunk": self.nominal_chunk,
            "frames": self.frames,
        }


def export_session(log_path) -> tuple[EcgRecord, GapReport]:
    """Reassemble a session log by sequence number.

    Delivered samples are concatenated in sequence order without
    interpolation. Missing frames are reported as half-open sample ranges
    on the original timeline, assuming every frame but the last carries
    the nominal chunk size.
    """
    entries = read_log(log_path)
    if not entries:
        raise EmptySession(f"no frames in {log_path}")
    by_seq: dict[int, TelemetryFrame] = {}
    for frame, _ in entries:
        by_seq.setdefault(frame.sequence_number, frame)
    seqs = sorted(by_seq)
    first = by_seq[seqs[0]]
    nominal = max(f.sample_count for f in by_seq.values())
    missing = [s for s in range(seqs[-1] + 1) if s not in by_seq]
    parts = [dequantize(by_seq[s].samples, by_seq[s].gain_uv_per_lsb) for s in seqs]
    record = EcgRecord(
        record_id=first.session_id.hex(),
        patient_ref=first.device_id.hex(),
        sample_rate_hz=first.sample_rate_hz,
        samples=np.concatenate(parts),
    )
    ranges = [(s * nominal, (s + 1) * nominal) for s in missing]
    return record, GapReport(missing, ranges, nominal, len(seqs))
