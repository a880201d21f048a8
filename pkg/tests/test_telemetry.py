from __future__ import annotations

import json
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgmon.errors import CorruptFrame, EmptySession, MalformedFrame, NotAFrame, StartupError
from ecgmon.signal import EcgRecord
from ecgmon.synth import synthesize_ecg
from ecgmon.telemetry import (
    FLAG_END_OF_SESSION,
    DeviceSession,
    DeviceSimulator,
    FaultConfig,
    FrameScanner,
    IngestServer,
    ServiceConfig,
    TelemetryFrame,
    decode_frame,
    encode_frame,
    export_session,
    quantize,
    quantized_record,
    read_log,
    simulate_device,
)
from ecgmon.telemetry.frame import HEADER_SIZE, MAX_FRAME_SIZE, frame_size
from ecgmon.telemetry.simulator import dequantize
from ecgmon.telemetry.session import seq_ranges


def reference_crc32(data: bytes) -> int:
    """Bit-at-a-time reflected CRC-32 (poly 0xEDB88320, init and xorout 0xFFFFFFFF)."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def frame(seq=0, samples=(0, 1, -1, 32767), flags=0, dev=b"\x00" * 8, sess=b"\x00" * 8, fs=360, gain=1.0):
    return TelemetryFrame(dev, sess, seq, fs, gain, samples, flags)


def record(seconds=10.0, fs=360, seed=0, rid="rec"):
    x, _ = synthesize_ecg(seconds, fs, rng=np.random.default_rng(seed), jitter=0.05, snr_db=25)
    return EcgRecord(rid, "pat", fs, x)


class TestCodec:
    def test_reference_crc_check_value(self):
        assert reference_crc32(b"123456789") == 0xCBF43926

    def test_reference_frame_bytes(self):
        body = (
            b"ECG1" + bytes([1, 0]) + b"\x00" * 8 + b"\x00" * 8
            + (0).to_bytes(4, "little") + (360).to_bytes(2, "little")
            + bytes.fromhex("0000803f")  # 1.0 as little-endian IEEE-754 single
            + (4).to_bytes(2, "little")
            + b"".join(v.to_bytes(2, "little", signed=True) for v in (0, 1, -1, 32767))
        )
        data = encode_frame(frame())
        assert len(body) == HEADER_SIZE + 8 == 42
        assert data[:-4] == body
        assert int.from_bytes(data[-4:], "little") == reference_crc32(body)

    def test_round_trip(self):
        f = frame(seq=7, flags=FLAG_END_OF_SESSION, dev=b"devid123", sess=b"sess4567", gain=0.5)
        assert decode_frame(encode_frame(f)) == f
        assert decode_frame(encode_frame(f)).end_of_session

    def test_payload_flip_is_corrupt(self):
        data = bytearray(encode_frame(frame()))
        data[HEADER_SIZE + 1] ^= 0x01
        with pytest.raises(CorruptFrame):
            decode_frame(bytes(data))

    def test_bad_magic(self):
        data = bytearray(encode_frame(frame()))
        data[0] = ord("X")
        with pytest.raises(NotAFrame):
            decode_frame(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_frame(frame()))
        data[4] = 2
        with pytest.raises(MalformedFrame):
            decode_frame(bytes(data))

    def test_length_mismatch(self):
        data = encode_frame(frame())
        with pytest.raises(MalformedFrame):
            decode_frame(data[:-1])
        with pytest.raises(MalformedFrame):
            decode_frame(data[:10])

    @pytest.mark.parametrize("samples", [(), tuple(range(1025)), (40000,)])
    def test_invalid_frames_refused(self, samples):
        with pytest.raises(MalformedFrame):
            frame(samples=samples)

    def test_id_lengths(self):
        with pytest.raises(MalformedFrame):
            frame(dev=b"short")

    def test_gain_is_single_precision(self):
        f = frame(gain=0.1)
        assert f.gain_uv_per_lsb == float(np.float32(0.1))
        assert decode_frame(encode_frame(f)).gain_uv_per_lsb == f.gain_uv_per_lsb


frames = st.builds(
    TelemetryFrame,
    device_id=st.binary(min_size=8, max_size=8),
    session_id=st.binary(min_size=8, max_size=8),
    sequence_number=st.integers(0, 2**32 - 1),
    sample_rate_hz=st.integers(1, 65535),
    gain_uv_per_lsb=st.floats(0.0009765625, 1024.0, width=32),
    samples=st.lists(st.integers(-32768, 32767), min_size=1, max_size=64).map(tuple),
    flags=st.integers(0, 255),
)


@settings(max_examples=200, deadline=None)
@given(f=frames)
def test_codec_identity(f):
    data = encode_frame(f)
    assert len(data) == frame_size(f.sample_count)
    assert decode_frame(data) == f


@settings(max_examples=300, deadline=None)
@given(f=frames, data=st.data())
def test_single_bit_flip_detected(f, data):
    raw = bytearray(encode_frame(f))
    bit = data.draw(st.integers(0, 8 * len(raw) - 1))
    raw[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises((CorruptFrame, MalformedFrame, NotAFrame)):
        decode_frame(bytes(raw))


class TestScanner:
    def stream(self, n=5):
        return [encode_frame(frame(seq=i, samples=tuple(range(i, i + 10)))) for i in range(n)]

    def test_byte_at_a_time(self):
        parts = self.stream()
        sc = FrameScanner()
        got = []
        for b in b"".join(parts):
            got += sc.feed(bytes([b]))
        got += sc.finish()
        assert [f.sequence_number for f, _ in got] == list(range(5))
        assert [raw for _, raw in got] == parts
        assert sc.stats.frames == 5 and sc.stats.rejected == 0

    def test_skips_garbage(self):
        parts = self.stream(3)
        blob = b"junk" + parts[0] + b"\x00ECG" + parts[1] + b"EC" + parts[2] + b"tail"
        sc = FrameScanner()
        got = sc.feed(blob) + sc.finish()
        assert [f.sequence_number for f, _ in got] == [0, 1, 2]
        assert sc.stats.skipped_bytes > 0

    def test_bad_length_field_does_not_swallow_neighbours(self):
        parts = self.stream(4)
        bad = bytearray(parts[1])
        bad[32:34] = struct.pack("<H", 1000)  # claims far more samples than present
        sc = FrameScanner()
        got = sc.feed(parts[0] + bytes(bad) + parts[2] + parts[3]) + sc.finish()
        assert [f.sequence_number for f, _ in got] == [0, 2, 3]
        assert sc.stats.malformed == 1

    def test_corrupt_counted(self):
        parts = self.stream(3)
        bad = bytearray(parts[1])
        bad[-6] ^= 0xFF
        sc = FrameScanner()
        got = sc.feed(parts[0] + bytes(bad) + parts[2]) + sc.finish()
        assert [f.sequence_number for f, _ in got] == [0, 2]
        assert sc.stats.corrupt == 1

    def test_truncated_tail_is_malformed(self):
        parts = self.stream(2)
        sc = FrameScanner()
        got = sc.feed(parts[0] + parts[1][:-5]) + sc.finish()
        assert len(got) == 1 and sc.stats.malformed == 1

    def test_oversize_limit(self):
        big = encode_frame(frame(samples=tuple(range(500))))
        sc = FrameScanner(max_frame_size=200)
        assert sc.feed(big) + sc.finish() == []
        assert sc.stats.malformed >= 1
        assert MAX_FRAME_SIZE == frame_size(1024)


@settings(max_examples=60, deadline=None)
@given(cuts=st.lists(st.integers(0, 400), max_size=12), junk=st.binary(max_size=30))
def test_scanner_independent_of_chunking(cuts, junk):
    parts = [encode_frame(frame(seq=i, samples=(i, -i, 3))) for i in range(6)]
    blob = junk + b"".join(parts)
    sc = FrameScanner()
    got = []
    prev = 0
    for c in sorted(set(min(c, len(blob)) for c in cuts)):
        got += sc.feed(blob[prev:c])
        prev = c
    got += sc.feed(blob[prev:]) + sc.finish()
    assert [raw for _, raw in got][-6:] == parts


class TestQuantize:
    def test_rounding_and_saturation(self):
        c = quantize([0.0004, 0.0006, -0.0015, 100.0, -100.0], 1.0)
        assert list(c) == [0, 1, -2, 32767, -32768]

    def test_dequantize_inverse_on_grid(self):
        counts = np.arange(-500, 500, dtype=np.int16)
        assert np.array_equal(quantize(dequantize(counts, 2.5), 2.5), counts)

    def test_quantized_record_is_idempotent(self):
        q = quantized_record(record(2.0))
        assert quantized_record(q) == q


class TestSimulator:
    def test_frames_cover_record(self):
        rec = record(10.0)
        sim = DeviceSimulator(rec, chunk=360)
        txs = list(sim.frames())
        assert len(txs) == 10
        decoded = [decode_frame(t.data) for t in txs]
        assert [d.end_of_session for d in decoded] == [False] * 9 + [True]
        joined = np.concatenate([d.samples for d in decoded])
        assert np.array_equal(joined, quantize(rec.samples, 1.0))

    def test_partial_last_frame(self):
        rec = record(2.5)
        data, rep = simulate_device(rec, chunk=360)
        assert rep.frames_total == 3
        sc = FrameScanner()
        got = sc.feed(data) + sc.finish()
        assert got[-1][0].sample_count == 900 - 720

    def test_faults_are_seeded_and_reported(self):
        rec = record(60.0)
        fault = FaultConfig(corrupt_prob=0.2, drop_prob=0.1, seed=5)
        a, ra = simulate_device(rec, fault=fault)
        b, rb = simulate_device(rec, fault=fault)
        assert a == b and ra == rb
        assert ra.corrupted and ra.dropped
        assert set(ra.sent) | set(ra.dropped) == set(range(ra.frames_total))
        sc = FrameScanner()
        got = sc.feed(a) + sc.finish()
        assert sorted(f.sequence_number for f, _ in got) == ra.delivered
        assert sc.stats.rejected == len(ra.corrupted)

    def test_corruption_keeps_magic(self):
        sim = DeviceSimulator(record(30.0), fault=FaultConfig(corrupt_prob=1.0, seed=1, protect_final=False))
        for tx in sim.frames():
            assert tx.data[:4] == b"ECG1" and tx.fate == "corrupt"

    def test_final_frame_protected(self):
        sim = DeviceSimulator(record(5.0), fault=FaultConfig(drop_prob=1.0, seed=1))
        fates = [tx.fate for tx in sim.frames()]
        assert fates == ["drop"] * 4 + ["ok"]

    def test_fault_rates(self):
        rec = record(600.0, fs=100)
        _, rep = simulate_device(rec, chunk=10, fault=FaultConfig(corrupt_prob=0.05, seed=2))
        n = rep.frames_total - 1
        expected = 0.05 * n
        assert abs(len(rep.corrupted) - expected) < 4 * np.sqrt(n * 0.05 * 0.95)

    def test_bad_parameters(self):
        from ecgmon.errors import InvalidParameter

        with pytest.raises(InvalidParameter):
            FaultConfig(corrupt_prob=1.5)
        with pytest.raises(InvalidParameter):
            DeviceSimulator(record(1.0), chunk=0)
        with pytest.raises(InvalidParameter):
            list(DeviceSimulator(record(3.0)).stream("warp"))


class TestSessionLog:
    def test_ranges(self):
        assert seq_ranges([5, 1, 2, 3, 7, 8]) == [[1, 3], [5, 5], [7, 8]]
        assert seq_ranges([]) == []

    def test_append_index_and_export(self, tmp_path):
        rec = record(10.0)
        sim = DeviceSimulator(rec, fault=FaultConfig(drop_prob=0.3, seed=4))
        sess = DeviceSession(sim.device_id, sim.session_id, tmp_path)
        for tx in sim.frames():
            if tx.fate != "drop":
                sess.append(decode_frame(tx.data), tx.data)
        rep = sim.report
        assert sess.gap_list() == rep.dropped
        assert sess.next_expected_seq == 10
        index = json.loads(sess.index_path.read_text())
        assert index["gaps"] == rep.dropped and index["ended"]
        sess.close()
        out, gaps = export_session(sess.persisted_path)
        assert gaps.missing_seqs == rep.dropped
        q = quantize(rec.samples, 1.0)
        expect = np.concatenate([dequantize(q[s * 360:(s + 1) * 360], 1.0) for s in rep.sent])
        assert np.array_equal(out.samples, expect)
        assert all(hi - lo == 360 for lo, hi in gaps.missing_sample_ranges)

    def test_arrival_order_kept_and_reassembled(self, tmp_path):
        sess = DeviceSession(b"d" * 8, b"s" * 8, tmp_path)
        raws = [encode_frame(frame(seq=i, samples=(i,) * 4, dev=b"d" * 8, sess=b"s" * 8)) for i in range(4)]
        for i in (2, 0, 3, 1, 1):
            sess.append(decode_frame(raws[i]), raws[i])
        sess.close()
        assert [f.sequence_number for f, _ in read_log(sess.persisted_path)] == [2, 0, 3, 1, 1]
        out, gaps = export_session(sess.persisted_path)
        assert gaps.missing_seqs == [] and sess.duplicates == 1
        assert list(out.samples) == [0.0] * 4 + [0.001] * 4 + [0.002] * 4 + [0.003] * 4

    def test_empty_session(self, tmp_path):
        (tmp_path / "x.eclog").write_bytes(b"")
        with pytest.raises(EmptySession):
            export_session(tmp_path / "x.eclog")


def _send(host, port, data):
    with socket.create_connection((host, port)) as s:
        s.sendall(data)
        s.shutdown(socket.SHUT_WR)
        while s.recv(4096):
            pass


class TestServer:
    def test_lossless_single_device(self, tmp_path):
        rec = record(20.0)
        with IngestServer(ServiceConfig(port=0, storage_dir=str(tmp_path))) as srv:
            sim = DeviceSimulator(rec)
            rep = sim.send(*srv.address)
        logs = list(tmp_path.glob("*.eclog"))
        assert len(logs) == 1
        assert len(read_log(logs[0])) == len(rep.sent) == 20
        out, gaps = export_session(logs[0])
        assert np.array_equal(out.samples, quantized_record(rec).samples)
        assert out.sample_rate_hz == 360
        assert gaps.missing_seqs == []
        assert srv.stats()["frames"] == 20

    def test_concurrent_devices_with_faults(self, tmp_path):
        sims = [
            DeviceSimulator(record(15.0, seed=i, rid=f"r{i}"), fault=FaultConfig(0.1, 0.05, seed=i))
            for i in range(6)
        ]
        with IngestServer(ServiceConfig(port=0, storage_dir=str(tmp_path))) as srv:
            threads = [threading.Thread(target=s.send, args=srv.address) for s in sims]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            sessions = {s.session_id: s for s in srv.sessions()}
            stats = srv.stats()
        assert stats["sessions"] == 6 and stats["connections"] == 6
        assert stats["rejected"] == sum(len(s.report.corrupted) for s in sims)
        for sim in sims:
            lost = sorted(set(sim.report.dropped) | set(sim.report.corrupted))
            assert sessions[sim.session_id].gap_list() == lost

    def test_session_limit(self, tmp_path):
        with IngestServer(ServiceConfig(port=0, storage_dir=str(tmp_path), max_sessions=1)) as srv:
            for i in range(2):
                DeviceSimulator(record(3.0, rid=f"r{i}")).send(*srv.address)
            stats = srv.stats()
        assert stats["sessions"] == 1 and stats["refused"] == 3

    def test_garbage_connection(self, tmp_path):
        with IngestServer(ServiceConfig(port=0, storage_dir=str(tmp_path))) as srv:
            _send(*srv.address, b"hello world" * 100)
            stats = srv.stats()
        assert stats["frames"] == 0 and stats["skipped_bytes"] == 1100

    def test_port_in_use(self, tmp_path):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            s.listen()
            with pytest.raises(StartupError):
                IngestServer(ServiceConfig(port=s.getsockname()[1], storage_dir=str(tmp_path))).start()
