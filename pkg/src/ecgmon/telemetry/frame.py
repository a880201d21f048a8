"""Wire format for ECG sample frames.

Layout, all integers little-endian::

    offset  size  field
    0       4     magic "ECG1"
    4       1     version (1)
    5       1     flags (bit 0: end of session)
    6       8     device_id
    14      8     session_id
    22      4     sequence_number   u32
    26      2     sample_rate_hz    u16
    28      4     gain_uv_per_lsb   float32
    32      2     sample_count      u16, 1..1024
    34      2*n   samples           i16[n]
    34+2n   4     crc               CRC-32 of bytes [0, 34+2n)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import CorruptFrame, MalformedFrame, NotAFrame

MAGIC = b"ECG1"
VERSION = 1
FLAG_END_OF_SESSION = 0x01
MAX_SAMPLES = 1024
HEADER = struct.Struct("<4sBB8s8sIHfH")
HEADER_SIZE = HEADER.size
CRC_SIZE = 4
COUNT_OFFSET = HEADER_SIZE - 2
MAX_FRAME_SIZE = HEADER_SIZE + 2 * MAX_SAMPLES + CRC_SIZE


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def frame_size(sample_count: int) -> int:
    return HEADER_SIZE + 2 * sample_count + CRC_SIZE


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class TelemetryFrame:
    device_id: bytes
    session_id: bytes
    sequence_number: int
    sample_rate_hz: int
    gain_uv_per_lsb: float
    samples: tuple[int, ...]
    flags: int = 0
    version: int = VERSION

    def __post_init__(self):
        for name in ("device_id", "session_id"):
            v = bytes(getattr(self, name))
            if len(v) != 8:
                raise MalformedFrame(f"{name} must be exactly 8 bytes")
            object.__setattr__(self, name, v)
        samples = tuple(int(s) for s in self.samples)
        if not 1 <= len(samples) <= MAX_SAMPLES:
            raise MalformedFrame(f"sample_count must be in [1, {MAX_SAMPLES}], got {len(samples)}")
        if any(s < -32768 or s > 32767 for s in samples):
            raise MalformedFrame("samples must fit in signed 16 bits")
        object.__setattr__(self, "samples", samples)
        if not 0 <= self.sequence_number <= 0xFFFFFFFF:
            raise MalformedFrame("sequence_number must fit in u32")
        if not 0 < self.sample_rate_hz <= 0xFFFF:
            raise MalformedFrame("sample_rate_hz must fit in u16 and be positive")
        if not 0 <= self.flags <= 0xFF:
            raise MalformedFrame("flags must fit in u8")
        object.__setattr__(self, "gain_uv_per_lsb", _f32(self.gain_uv_per_lsb))

    @property
    def end_of_session(self) -> bool:
        return bool(self.flags & FLAG_END_OF_SESSION)

    @property
    def sample_count(self) -> int:
        return len(self.samples)


def encode_frame(frame: TelemetryFrame) -> bytes:
    head = HEADER.pack(
        MAGIC,
        frame.version,
        frame.flags,
        frame.device_id,
        frame.session_id,
        frame.sequence_number,
        frame.sample_rate_hz,
        frame.gain_uv_per_lsb,
        len(frame.samples),
    )
    body = head + np.asarray(frame.samples, dtype="<i2").tobytes()
    return body + struct.pack("<I", crc32(body))


def decode_frame(data: bytes) -> TelemetryFrame:
    """Decode exactly one frame, validating magic, version, length and CRC."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise MalformedFrame(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    magic, version, flags, dev, sess, seq, fs, gain, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise NotAFrame("bad magic")
    if version != VERSION:
        raise MalformedFrame(f"unsupported version {version}")
    if not 1 <= count <= MAX_SAMPLES:
        raise MalformedFrame(f"sample_count {count} out of bounds")
    size = frame_size(count)
    if len(data) != size:
        raise MalformedFrame(f"frame length {len(data)} does not match sample_count {count}")
    (crc,) = struct.unpack_from("<I", data, size - CRC_SIZE)
    if crc32(data[: size - CRC_SIZE]) != crc:
        raise CorruptFrame(f"crc mismatch on sequence {seq}")
    samples = np.frombuffer(data, dtype="<i2", count=count, offset=HEADER_SIZE)
    if fs == 0:
        raise MalformedFrame("sample_rate_hz is zero")
    return TelemetryFrame(dev, sess, seq, fs, gain, tuple(samples.tolist()), flags, version)


@dataclass
class ScanStats:
    frames: int = 0
    corrupt: int = 0
    malformed: int = 0
    skipped_bytes: int = 0

    @property
    def rejected(self) -> int:
        return self.corrupt + self.malformed


@dataclass
class FrameScanner:
    """Incremental stream decoder that resynchronizes on the magic bytes.

    A frame that fails validation is dropped by advancing one byte past its
    magic, so a damaged length field cannot swallow the frames behind it.
    """

    max_frame_size: int = MAX_FRAME_SIZE
    stats: ScanStats = field(default_factory=ScanStats)
    _buf: bytearray = field(default_factory=bytearray, repr=False)

    def feed(self, data: bytes) -> list[tuple[TelemetryFrame, bytes]]:
        self._buf += data
        return self._drain(eof=False)

    def finish(self) -> list[tuple[TelemetryFrame, bytes]]:
        """Flush at end of stream; an incomplete trailing frame counts as malformed."""
        out = self._drain(eof=True)
        self.stats.skipped_bytes += len(self._buf)
        self._buf.clear()
        return out

    def _reject(self, kind: str) -> None:
        if kind == "corrupt":
            self.stats.corrupt += 1
        else:
            self.stats.malformed += 1
        del self._buf[:1]

    def _drain(self, eof: bool) -> list[tuple[TelemetryFrame, bytes]]:
        out = []
        buf = self._buf
        while True:
            pos = buf.find(MAGIC)
            if pos < 0:
                keep = 0 if eof else len(MAGIC) - 1
                drop = max(0, len(buf) - keep)
                self.stats.skipped_bytes += drop
                del buf[:drop]
                return out
            if pos:
                self.stats.skipped_bytes += pos
                del buf[:pos]
            if len(buf) < HEADER_SIZE:
                if eof:
                    self._reject("malformed")
                    continue
                return out
            version = buf[4]
            (count,) = struct.unpack_from("<H", buf, COUNT_OFFSET)
            size = frame_size(count)
            if version != VERSION or not 1 <= count <= MAX_SAMPLES or size > self.max_frame_size:
                self._reject("malformed")
                continue
            if len(buf) < size:
                if eof:
                    self._reject("malformed")
                    continue
                return out
            raw = bytes(buf[:size])
            try:
                frame = decode_frame(raw)
            except CorruptFrame:
                self._reject("corrupt")
                continue
            except (MalformedFrame, NotAFrame):
                self._reject("malformed")
                continue
            del buf[:size]
            self.stats.frames += 1
            out.append((frame, raw))
