"""Plan evaluators: conventional remote analysis, local analysis, ML surrogate.

Each plan is decomposed into phases (one transfer or one compute step each).
A plan's exact cost is the rational sum of its phases; its nanosecond cost is
the sum of the phases rounded up individually, which is what a virtual-time
execution of the same steps produces.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

from dcaiflow.costmodel.model import (
    DatasetSpec,
    LinkModel,
    MissingCostError,
    OperationCostTable,
    OperationKind,
    ParameterError,
    SiteId,
    transfer_exact,
)
from dcaiflow.timebase import NS_PER_S, Number, exact


class Plan(enum.Enum):
    CONVENTIONAL = "conventional"
    LOCAL_ANALYSIS = "local"
    ML_SURROGATE = "surrogate"


# Exact ties resolve in this order.
PLAN_ORDER = (Plan.CONVENTIONAL, Plan.LOCAL_ANALYSIS, Plan.ML_SURROGATE)


class PlanUnavailable(MissingCostError):
    def __init__(self, plan: Plan, missing: MissingCostError):
        LookupError.__init__(self, f"plan {plan.value} unavailable: {missing}")
        self.plan = plan
        self.kind = missing.kind
        self.site = missing.site


class NoPlanAvailable(LookupError):
    pass


@dataclass(frozen=True)
class PlanQuery:
    dataset: DatasetSpec
    training_fraction_p: Number
    link: LinkModel
    costs: OperationCostTable
    experiment_site: SiteId = "ex"
    datacenter_site: SiteId = "dc"

    def __post_init__(self) -> None:
        p = exact(self.training_fraction_p)
        if not 0 < p <= 1:
            raise ParameterError(f"training_fraction_p must be in (0, 1], got {self.training_fraction_p}")

    @property
    def p(self) -> Fraction:
        return exact(self.training_fraction_p)

    def with_count(self, n: int) -> "PlanQuery":
        ds = self.dataset
        files = max(ds.file_count, 1) if n > 0 else ds.file_count
        return replace(self, dataset=replace(ds, count_n=n, file_count=files))

    def time_scaled(self, k: Number) -> "PlanQuery":
        """Same query with every time-valued parameter multiplied by *k*."""
        k = exact(k)
        if k <= 0:
            raise ParameterError("scale must be positive")
        link = self.link
        return replace(
            self,
            costs=self.costs.scaled(k),
            link=LinkModel(
                rate_v=exact(link.rate_v) / k,
                startup_s=exact(link.startup_s) * k,
                rtt=exact(link.rtt) * k,
                per_file_overhead=exact(link.per_file_overhead) * k,
            ),
        )


@dataclass(frozen=True)
class Phase:
    name: str
    kind: str  # "transfer" or "compute"
    seconds: Fraction
    nbytes: int = 0
    files: int = 0
    count: int = 0
    site: SiteId = ""

    @property
    def ns(self) -> int:
        return math.ceil(self.seconds * NS_PER_S)


@dataclass(frozen=True)
class PlanVerdict:
    conventional_cost: float | None
    local_cost: float | None
    surrogate_cost: float | None
    chosen: Plan

    def cost_of(self, plan: Plan) -> float | None:
        return {
            Plan.CONVENTIONAL: self.conventional_cost,
            Plan.LOCAL_ANALYSIS: self.local_cost,
            Plan.ML_SURROGATE: self.surrogate_cost,
        }[plan]


def training_count(q: PlanQuery) -> int:
    return math.ceil(q.p * q.dataset.count_n)


def _transfer(name: str, nbytes: int, files: int, link: LinkModel) -> Phase:
    return Phase(name, "transfer", transfer_exact(nbytes, files, link), nbytes=nbytes, files=files)


def _compute(name: str, q: PlanQuery, kind: OperationKind, site: SiteId, count: int) -> Phase:
    cost = q.costs.lookup(kind, site)
    return Phase(name, "compute", cost.seconds(count), count=count, site=site)


def conventional_phases(q: PlanQuery) -> list[Phase]:
    ds, n = q.dataset, q.dataset.count_n
    return [
        _transfer("data_transfer", n * ds.datum_bytes, ds.file_count, q.link),
        _compute("analyze", q, OperationKind.ANALYZE, q.datacenter_site, n),
        _transfer("result_transfer", n * ds.result_bytes, 1 if n else 0, q.link),
    ]


def local_phases(q: PlanQuery) -> list[Phase]:
    return [_compute("analyze", q, OperationKind.ANALYZE, q.experiment_site, q.dataset.count_n)]


def surrogate_phases(q: PlanQuery) -> list[Phase]:
    ds = q.dataset
    n_train = training_count(q)
    n_est = ds.count_n - n_train
    train = q.costs.lookup(OperationKind.TRAIN, q.datacenter_site)
    if exact(train.per_datum_us) != 0:
        raise ParameterError("training is charged per invocation; per_datum_us must be 0")
    # Labels ride back with the model, so they pay no startup of their own.
    return [
        _transfer("data_transfer", n_train * ds.datum_bytes, math.ceil(q.p * ds.file_count), q.link),
        _compute("analyze", q, OperationKind.ANALYZE, q.datacenter_site, n_train),
        _compute("train", q, OperationKind.TRAIN, q.datacenter_site, 0),
        _transfer("model_transfer", n_train * ds.result_bytes + ds.model_bytes, 1, q.link),
        _compute("estimate", q, OperationKind.ESTIMATE, q.experiment_site, n_est),
    ]


_PHASES = {
    Plan.CONVENTIONAL: conventional_phases,
    Plan.LOCAL_ANALYSIS: local_phases,
    Plan.ML_SURROGATE: surrogate_phases,
}


def plan_phases(q: PlanQuery, plan: Plan) -> list[Phase]:
    try:
        return _PHASES[plan](q)
    except MissingCostError as exc:
        raise PlanUnavailable(plan, exc) from None


def plan_cost_exact(q: PlanQuery, plan: Plan) -> Fraction:
    return sum((ph.seconds for ph in plan_phases(q, plan)), Fraction(0))


def plan_cost_ns(q: PlanQuery, plan: Plan) -> int:
    return sum(ph.ns for ph in plan_phases(q, plan))


def eval_conventional(q: PlanQuery) -> float:
    return float(plan_cost_exact(q, Plan.CONVENTIONAL))


def eval_local(q: PlanQuery) -> float:
    return float(plan_cost_exact(q, Plan.LOCAL_ANALYSIS))


def eval_surrogate(q: PlanQuery) -> float:
    return float(plan_cost_exact(q, Plan.ML_SURROGATE))


def choose_plan(q: PlanQuery) -> PlanVerdict:
    costs: dict[Plan, Fraction] = {}
    for plan in PLAN_ORDER:
        try:
            costs[plan] = plan_cost_exact(q, plan)
        except PlanUnavailable:
            continue
    if not costs:
        raise NoPlanAvailable("no plan can be evaluated with this cost table")
    # min() keeps the first of equal keys, and PLAN_ORDER fixes that order.
    chosen = min(costs, key=lambda plan: costs[plan])

    def f(plan: Plan) -> float | None:
        return float(costs[plan]) if plan in costs else None

    return PlanVerdict(f(Plan.CONVENTIONAL), f(Plan.LOCAL_ANALYSIS), f(Plan.ML_SURROGATE), chosen)


def per_datum_slopes(q: PlanQuery) -> tuple[Fraction, Fraction]:
    """(conventional, surrogate) marginal seconds per datum, ignoring rounding."""
    ds, v = q.dataset, exact(q.link.rate_v)
    analyze = exact(q.costs.lookup(OperationKind.ANALYZE, q.datacenter_site).per_datum_us) / 1_000_000
    estimate = exact(q.costs.lookup(OperationKind.ESTIMATE, q.experiment_site).per_datum_us) / 1_000_000
    conv = Fraction(ds.datum_bytes + ds.result_bytes) / v + analyze
    return conv, q.p * conv + (1 - q.p) * estimate


def crossover(q: PlanQuery) -> int | None:
    """Smallest N with surrogate cost <= conventional cost, or None.

    For N >= 1 both plans are affine except for the whole-datum training
    count, so the gap is ``(N - ceil(pN)) * (conv_slope - estimate) - J``;
    that is closed-form in ``floor((1-p)N)``. The result is confirmed
    against the exact evaluators on both sides.
    """
    conv_slope, surr_slope = per_datum_slopes(q)
    if conv_slope <= surr_slope:
        return None
    p = q.p
    est = exact(q.costs.lookup(OperationKind.ESTIMATE, q.experiment_site).per_datum_us) / 1_000_000
    d = conv_slope - est

    def gap(n: int) -> Fraction:
        qn = q.with_count(n)
        return plan_cost_exact(qn, Plan.CONVENTIONAL) - plan_cost_exact(qn, Plan.ML_SURROGATE)

    if gap(0) >= 0:
        return 0
    # At N = 1 the whole datum is used for training, so the estimate count is 0.
    j = -gap(1)
    k = max(0, math.ceil(j / d))
    n = max(1, math.ceil(Fraction(k) / (1 - p)))
    while n > 1 and gap(n - 1) >= 0:
        n -= 1
    while gap(n) < 0:
        n += 1
    return n


@dataclass(frozen=True)
class SweepRow:
    n: int
    conventional_s: float
    surrogate_s: float


def sweep(q: PlanQuery, n_values: Sequence[int]) -> list[SweepRow]:
    if not n_values:
        raise ParameterError("n_values must be non-empty")
    rows = []
    for n in n_values:
        if n < 0:
            raise ParameterError(f"negative N in sweep: {n}")
        qn = q.with_count(int(n))
        rows.append(SweepRow(int(n), eval_conventional(qn), eval_surrogate(qn)))
    return rows


def sweep_points(text: str) -> list[int]:
    """Parse ``start:stop:count`` into *count* evenly spaced integer N values."""
    try:
        start_s, stop_s, count_s = text.split(":")
        start, stop = exact(start_s), exact(stop_s)
        count = int(exact(count_s))
    except (ValueError, ZeroDivisionError):
        raise ParameterError(f"sweep must look like start:stop:count, got {text!r}") from None
    if count < 1 or start < 0 or stop < start:
        raise ParameterError(f"invalid sweep range {text!r}")
    if count == 1:
        return [round(start)]
    step = (stop - start) / (count - 1)
    return [round(start + i * step) for i in range(count)]


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["n", "conventional_s", "surrogate_s"])
    for row in rows:
        writer.writerow([row.n, repr(row.conventional_s), repr(row.surrogate_s)])
    return out.getvalue()
