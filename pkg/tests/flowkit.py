"""Helpers for building engines on a virtual clock in tests."""

from __future__ import annotations

from typing import Any, Mapping

from dcaiflow.faas import FunctionBody, FunctionEndpoint
from dcaiflow.flow import Engine, ProviderStatus, RunStore, flow_from_doc
from dcaiflow.flow.providers import ComputeProvider, TransferProvider
from dcaiflow.timebase import VirtualClock
from dcaiflow.transfer import SimLink, SimulatedTransferService

S = 1_000_000_000


def train_doc(data_s=7, model_s=5, *, retries=1, flow_id="train"):
    return {
        "flow_id": flow_id,
        "start": "data_transfer",
        "states": {
            "data_transfer": {
                "kind": "transfer",
                "provider": "transfer",
                "role": "data_transfer",
                "params": {"src": "ex", "dst": "dc", "path": "train.h5", "duration_s": data_s},
                "max_retries": retries,
                "next": "train",
            },
            "train": {
                "kind": "compute",
                "provider": "hpc",
                "role": "train",
                "params": {"function": "$input.fn"},
                "max_retries": retries,
                "next": "model_transfer",
            },
            "model_transfer": {
                "kind": "transfer",
                "provider": "transfer",
                "role": "model_transfer",
                "params": {"src": "dc", "dst": "ex", "path": "model.pt", "duration_s": model_s},
                "max_retries": retries,
            },
        },
    }


class Rig:
    """A virtual clock, one simulated endpoint, a simulated link and an engine."""

    def __init__(self, store: RunStore, *, train_s=19, capacity=1, overhead_ns=0, extra: Mapping[str, Any] | None = None):
        self.clock = VirtualClock()
        self.endpoint = FunctionEndpoint("hpc", capacity=capacity, clock=self.clock)
        self.endpoint.register(FunctionBody.simulated(train_s, {"loss": 0.01}), name="train")
        link = SimLink(per_stream_bps=10**9, aggregate_bps=10**9)
        self.transfers = SimulatedTransferService(self.clock, {("ex", "dc"): link}, symmetric=True)
        self.providers = {"hpc": ComputeProvider(self.endpoint), "transfer": TransferProvider(self.transfers), **(extra or {})}
        self.store = store
        self.engine = Engine(self.providers, store, self.clock, orchestration_overhead_ns=overhead_ns)

    def run(self, doc, inputs=None, key=None):
        rid = self.engine.start_run(flow_from_doc(doc), inputs if inputs is not None else {"fn": "train"}, key)
        return self.engine.run_to_completion(rid)


class ScriptedProvider:
    """Fails the first ``fail_first`` dispatches, then succeeds after ``seconds``."""

    def __init__(self, clock, *, fail_first=0, seconds=1, output=None, poll_error=False):
        self.clock = clock
        self.fail_first = fail_first
        self.seconds = seconds
        self.output = output or {}
        self.poll_error = poll_error
        self.keys: list[str] = []
        self.done_at: dict[str, int] = {}
        self.cancelled: list[str] = []

    def dispatch(self, kind, params, idempotency_key):
        self.keys.append(idempotency_key)
        if len(self.keys) <= self.fail_first:
            raise RuntimeError(f"refused {idempotency_key}")
        at = self.clock.now_ns() + self.seconds * S
        self.done_at.setdefault(idempotency_key, at)
        self.clock.call_at(self.done_at[idempotency_key], lambda: None)
        return idempotency_key

    def poll(self, handle):
        if self.poll_error:
            raise RuntimeError("lost the handle")
        if self.clock.now_ns() < self.done_at[handle]:
            return ProviderStatus("active")
        return ProviderStatus("succeeded", dict(self.output))

    def cancel(self, handle):
        self.cancelled.append(handle)
