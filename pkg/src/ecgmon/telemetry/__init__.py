"""Framing, device simulation and ingestion of streamed ECG samples."""

from .frame import (
    FLAG_END_OF_SESSION,
    HEADER_SIZE,
    MAGIC,
    MAX_SAMPLES,
    FrameScanner,
    TelemetryFrame,
    decode_frame,
    encode_frame,
)
from .server import IngestServer, ServiceConfig, serve_ingest
from .session import DeviceSession, GapReport, export_session, read_log
from .simulator import (
    DeviceSimulator,
    FaultConfig,
    SimulationReport,
    dequantize,
    make_id,
    quantize,
    quantized_record,
    simulate_device,
)

__all__ = [
    "FLAG_END_OF_SESSION", "HEADER_SIZE", "MAGIC", "MAX_SAMPLES", "FrameScanner", "TelemetryFrame",
    "decode_frame", "encode_frame", "IngestServer", "ServiceConfig", "serve_ingest", "DeviceSession",
    "GapReport", "export_session", "read_log", "DeviceSimulator", "FaultConfig", "SimulationReport",
    "dequantize", "make_id", "quantize", "quantized_record", "simulate_device",
]
