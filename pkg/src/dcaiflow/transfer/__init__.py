"""Parallel, verified file movement, real and simulated."""

from dcaiflow.transfer.endpoints import (
    LocalEndpoint,
    RemoteEndpoint,
    StreamBroken,
    TransferDaemon,
    WanEmulation,
    file_digest,
)
from dcaiflow.transfer.service import FaultPlan, TransferService
from dcaiflow.transfer.sim import SimLink, SimulatedTransferService, benchmark
from dcaiflow.transfer.spec import (
    REPORT_CSV_HEADER,
    BenchRow,
    FileReport,
    FileState,
    TransferError,
    TransferNotFound,
    TransferOutcome,
    TransferReport,
    TransferSpec,
    TransferSpecError,
    UnknownEndpoint,
    auto_cc,
    report_csv,
    split_bytes,
)

__all__ = [
    "REPORT_CSV_HEADER",
    "BenchRow",
    "FaultPlan",
    "FileReport",
    "FileState",
    "LocalEndpoint",
    "RemoteEndpoint",
    "SimLink",
    "SimulatedTransferService",
    "StreamBroken",
    "TransferDaemon",
    "TransferError",
    "TransferNotFound",
    "TransferOutcome",
    "TransferReport",
    "TransferService",
    "TransferSpec",
    "TransferSpecError",
    "UnknownEndpoint",
    "WanEmulation",
    "auto_cc",
    "benchmark",
    "file_digest",
    "report_csv",
    "split_bytes",
]
