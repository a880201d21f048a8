"""Wearable device simulator: quantizes a trace into frames and injects faults."""

from __future__ import annotations

import hashlib
import socket
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..errors import InvalidParameter
from ..signal import EcgRecord
from .frame import FLAG_END_OF_SESSION, MAGIC, MAX_SAMPLES, TelemetryFrame, encode_frame

DEFAULT_GAIN_UV_PER_LSB = 1.0


def quantize(samples_mv, gain_uv_per_lsb: float) -> np.ndarray:
    """Millivolts to int16 ADC counts, rounding to nearest and saturating."""
    gain = float(np.float32(gain_uv_per_lsb))
    counts = np.rint(np.asarray(samples_mv, dtype=np.float64) * 1000.0 / gain)
    return np.clip(counts, -32768, 32767).astype(np.int16)


def dequantize(counts, gain_uv_per_lsb: float) -> np.ndarray:
    gain = float(np.float32(gain_uv_per_lsb))
    return np.asarray(counts, dtype=np.float64) * gain / 1000.0


def quantized_record(record: EcgRecord, gain_uv_per_lsb: float = DEFAULT_GAIN_UV_PER_LSB) -> EcgRecord:
    """The record as the receiver will reconstruct it from lossless frames."""
    return record.with_samples(dequantize(quantize(record.samples, gain_uv_per_lsb), gain_uv_per_lsb))


def make_id(text: str) -> bytes:
    """8-byte identifier derived from a human-readable name."""
    return hashlib.sha256(text.encode()).digest()[:8]


@dataclass(frozen=True)
class FaultConfig:
    corrupt_prob: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0
    protect_final: bool = True

    def __post_init__(self):
        for name in ("corrupt_prob", "drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameter(f"{name} must lie in [0, 1], got {v}")


@dataclass
class TxFrame:
    sequence_number: int
    data: bytes
    fate: str  # "ok", "corrupt" or "drop"
    capture_end_s: float


@dataclass
class SimulationReport:
    frames_total: int = 0
    sent: list[int] = field(default_factory=list)
    corrupted: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    bytes_sent: int = 0

    @property
    def delivered(self) -> list[int]:
        bad = set(self.corrupted)
        return [s for s in self.sent if s not in bad]


class DeviceSimulator:
    """Turns an :class:`EcgRecord` into a stream of encoded frames.

    Faults are applied after encoding. ``drop`` removes a frame from the
    stream; ``corrupt`` XORs one byte after the magic with a nonzero value.
    With ``protect_final`` the end-of-session frame is always delivered
    intact, standing in for a reliable session-close exchange.
    """

    def __init__(
        self,
        record: EcgRecord,
        chunk: int = 360,
        *,
        device_id: bytes | None = None,
        session_id: bytes | None = None,
        gain_uv_per_lsb: float = DEFAULT_GAIN_UV_PER_LSB,
        fault: FaultConfig | None = None,
    ):
        if not 1 <= chunk <= MAX_SAMPLES:
            raise InvalidParameter(f"chunk must be in [1, {MAX_SAMPLES}], got {chunk}")
        self.record = record
        self.chunk = int(chunk)
        self.device_id = device_id or make_id(f"device:{record.patient_ref or record.record_id}")
        self.session_id = session_id or make_id(f"session:{record.record_id}")
        self.gain = float(np.float32(gain_uv_per_lsb))
        self.fault = fault or FaultConfig()
        self.report = SimulationReport()

    def frames(self) -> Iterator[TxFrame]:
        counts = quantize(self.record.samples, self.gain)
        fs = self.record.sample_rate_hz
        n = counts.size
        n_frames = -(-n // self.chunk)
        rng = np.random.default_rng(self.fault.seed)
        rep = self.report = SimulationReport(frames_total=n_frames)
        for seq in range(n_frames):
            lo = seq * self.chunk
            hi = min(n, lo + self.chunk)
            last = seq == n_frames - 1
            frame = TelemetryFrame(
                self.device_id,
                self.session_id,
                seq,
                fs,
                self.gain,
                tuple(counts[lo:hi].tolist()),
                FLAG_END_OF_SESSION if last else 0,
            )
            data = encode_frame(frame)
            u_drop, u_corrupt = rng.random(2)
            pos = int(rng.integers(len(MAGIC), len(data)))
            xor = int(rng.integers(1, 256))
            fate = "ok"
            if not (last and self.fault.protect_final):
                if u_drop < self.fault.drop_prob:
                    fate = "drop"
                elif u_corrupt < self.fault.corrupt_prob:
                    fate = "corrupt"
                    buf = bytearray(data)
                    buf[pos] ^= xor
                    data = bytes(buf)
            if fate == "drop":
                rep.dropped.append(seq)
            else:
                rep.sent.append(seq)
                rep.bytes_sent += len(data)
                if fate == "corrupt":
                    rep.corrupted.append(seq)
            yield TxFrame(seq, data, fate, hi / fs)

    def stream(self, pacing: str = "max-speed") -> Iterator[bytes]:
        """Bytes on the wire; ``realtime`` waits until each chunk would have been captured."""
        if pacing not in ("realtime", "max-speed"):
            raise InvalidParameter(f"unknown pacing {pacing!r}")
        start = time.monotonic()
        for tx in self.frames():
            if pacing == "realtime":
                delay = start + tx.capture_end_s - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            if tx.fate != "drop":
                yield tx.data

    def byte_stream(self) -> bytes:
        return b"".join(self.stream("max-speed"))

    def send(self, host: str, port: int, pacing: str = "max-speed", timeout: float = 30.0) -> SimulationReport:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            for data in self.stream(pacing):
                sock.sendall(data)
            sock.shutdown(socket.SHUT_WR)
            # wait for the server to close its side so every byte is consumed
            while sock.recv(4096):
                pass
        return self.report


def simulate_device(
    record: EcgRecord,
    chunk: int = 360,
    pacing: str = "max-speed",
    fault: FaultConfig | None = None,
    **kwargs,
) -> tuple[bytes, SimulationReport]:
    """Encode the whole record; returns the wire bytes and the ground-truth fault report."""
    sim = DeviceSimulator(record, chunk, fault=fault, **kwargs)
    data = b"".join(sim.stream(pacing))
    return data, sim.report
