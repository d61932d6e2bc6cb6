"""Declarative flows and the engine that runs them."""

from dcaiflow.flow.definition import (
    ActionKind,
    ActionSpec,
    ChoiceSpec,
    FlowDefinition,
    FlowParseError,
    flow_from_doc,
    load_flow,
    parse_flow,
)
from dcaiflow.flow.engine import (
    LEGAL_TRANSITIONS,
    ActionLog,
    ActionState,
    CancelAck,
    DelayLog,
    Engine,
    EngineDeadlock,
    MissingInput,
    ProviderStatus,
    ProviderUnavailable,
    RunNotFound,
    RunRecord,
    RunStatus,
    UnknownProvider,
)
from dcaiflow.flow.replay import AuditReport, audit_directory, audit_records, audit_store, violations
from dcaiflow.flow.store import RunStore, SimulatedCrash

__all__ = [
    "LEGAL_TRANSITIONS",
    "ActionKind",
    "ActionLog",
    "ActionSpec",
    "ActionState",
    "AuditReport",
    "CancelAck",
    "ChoiceSpec",
    "DelayLog",
    "Engine",
    "EngineDeadlock",
    "FlowDefinition",
    "FlowParseError",
    "MissingInput",
    "ProviderStatus",
    "ProviderUnavailable",
    "RunNotFound",
    "RunRecord",
    "RunStatus",
    "RunStore",
    "SimulatedCrash",
    "UnknownProvider",
    "audit_directory",
    "audit_records",
    "audit_store",
    "flow_from_doc",
    "load_flow",
    "parse_flow",
    "violations",
]
