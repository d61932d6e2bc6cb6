"""Deterministic virtual-time harness for whole-workflow scenarios."""

from dcaiflow.simnet.runner import (
    BREAKDOWN_HEADER,
    ComparisonError,
    RunBreakdown,
    ScenarioDeadlock,
    Timeline,
    TimelineEvent,
    compare_modes,
    run_scenario,
    scenario_from_plan,
    scenarios_csv,
)
from dcaiflow.simnet.scenario import (
    TRANSFER_PROVIDER,
    FaultDecl,
    Scenario,
    ScenarioError,
    Topology,
    load_scenario,
    parse_scenario,
    scenario_from_doc,
)

__all__ = [
    "BREAKDOWN_HEADER",
    "TRANSFER_PROVIDER",
    "ComparisonError",
    "FaultDecl",
    "RunBreakdown",
    "Scenario",
    "ScenarioDeadlock",
    "ScenarioError",
    "Timeline",
    "TimelineEvent",
    "Topology",
    "compare_modes",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
    "scenario_from_doc",
    "scenario_from_plan",
    "scenarios_csv",
]
