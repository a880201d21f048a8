"""ECG monitoring pipeline.

Signal conditioning and beat features, dataset assembly, a NumPy
multilayer perceptron, classification metrics, and a framed telemetry
path from simulated wearables to an ingestion service.
"""

from __future__ import annotations

__version__ = "0.1.0"
