"""Analytical cost model for conventional vs. ML-surrogate processing."""

from dcaiflow.costmodel.config import load_plan_query, parse_plan_query
from dcaiflow.costmodel.fit import FitError, LinkFit, fit_link_model
from dcaiflow.costmodel.model import (
    DatasetSpec,
    LinkModel,
    MissingCostError,
    OperationCostTable,
    OperationKind,
    ParameterError,
    UnitCost,
    transfer_exact,
    transfer_time,
    transfer_time_ns,
)
from dcaiflow.costmodel.plans import (
    NoPlanAvailable,
    Phase,
    Plan,
    PlanQuery,
    PlanUnavailable,
    PlanVerdict,
    SweepRow,
    choose_plan,
    conventional_phases,
    crossover,
    eval_conventional,
    eval_local,
    eval_surrogate,
    plan_cost_exact,
    plan_cost_ns,
    plan_phases,
    surrogate_phases,
    sweep,
    sweep_csv,
    sweep_points,
    training_count,
)
from dcaiflow.costmodel.presets import HEDM_CONFIG, hedm_query

__all__ = [
    "DatasetSpec",
    "FitError",
    "HEDM_CONFIG",
    "LinkFit",
    "LinkModel",
    "MissingCostError",
    "NoPlanAvailable",
    "OperationCostTable",
    "OperationKind",
    "ParameterError",
    "Phase",
    "Plan",
    "PlanQuery",
    "PlanUnavailable",
    "PlanVerdict",
    "SweepRow",
    "UnitCost",
    "choose_plan",
    "conventional_phases",
    "crossover",
    "eval_conventional",
    "eval_local",
    "eval_surrogate",
    "fit_link_model",
    "hedm_query",
    "load_plan_query",
    "parse_plan_query",
    "plan_cost_exact",
    "plan_cost_ns",
    "plan_phases",
    "surrogate_phases",
    "sweep",
    "sweep_csv",
    "sweep_points",
    "training_count",
    "transfer_exact",
    "transfer_time",
    "transfer_time_ns",
]
