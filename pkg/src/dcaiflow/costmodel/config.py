"""Load a :class:`PlanQuery` from a key/value document.

Schema (values in the units shown)::

    dataset.datum_bytes      bytes per raw datum
    dataset.result_bytes     bytes per analysis result
    dataset.model_bytes      bytes of the trained model
    dataset.count_n          number of data (default 0)
    dataset.file_count       files holding the data (default 1)
    link.rate_v              bytes/s
    link.startup_s           s (default 0)
    link.rtt                 s (default 0)
    link.per_file_overhead   s/file (default 0)
    plan.training_fraction_p fraction in (0, 1]
    plan.experiment_site     site id (default "ex")
    plan.datacenter_site     site id (default "dc")
    cost.<kind>.<site>           µs per datum
    cost.<kind>.<site>.per_datum µs per datum (same as above)
    cost.<kind>.<site>.fixed     µs per invocation

``<kind>`` is one of collect, simulate, analyze, train, deploy, estimate.
Keys outside the dataset/link/plan/cost groups are left for other readers.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

from dcaiflow.costmodel.model import (
    DatasetSpec,
    LinkModel,
    OperationCostTable,
    OperationKind,
    ParameterError,
    UnitCost,
)
from dcaiflow.costmodel.plans import PlanQuery
from dcaiflow.kvconfig import ConfigError, KVDocument

OWNED_PREFIXES = ("dataset.", "link.", "plan.", "cost.")


def _costs(doc: KVDocument) -> OperationCostTable:
    per_datum: dict[tuple[OperationKind, str], tuple[Fraction, Fraction]] = {}
    for e in doc.with_prefix("cost."):
        parts = e.key.split(".")
        if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] not in ("fixed", "per_datum")):
            raise ConfigError(f"cost keys look like cost.<kind>.<site>[.fixed|.per_datum], got {e.key!r}", e.line, doc.source)
        try:
            kind = OperationKind(parts[1])
        except ValueError:
            raise ConfigError(f"unknown operation kind {parts[1]!r}", e.line, doc.source) from None
        value = doc.number(e.key, kind=Fraction)
        if value < 0:
            raise ConfigError(f"{e.key}: costs must be non-negative", e.line, doc.source)
        pd, fx = per_datum.get((kind, parts[2]), (Fraction(0), Fraction(0)))
        if len(parts) == 4 and parts[3] == "fixed":
            fx = value
        else:
            pd = value
        per_datum[(kind, parts[2])] = (pd, fx)
    return OperationCostTable({key: UnitCost(pd, fx) for key, (pd, fx) in per_datum.items()})


def plan_query_from_doc(doc: KVDocument) -> PlanQuery:
    def build(key_hint: str, fn):
        try:
            return fn()
        except ParameterError as exc:
            raise doc.error(key_hint, str(exc)) from None

    dataset = build(
        "dataset.datum_bytes",
        lambda: DatasetSpec(
            datum_bytes=doc.number("dataset.datum_bytes", kind=int),
            result_bytes=doc.number("dataset.result_bytes", kind=int),
            model_bytes=doc.number("dataset.model_bytes", kind=int),
            count_n=doc.number("dataset.count_n", 0, kind=int),
            file_count=doc.number("dataset.file_count", 1, kind=int),
        ),
    )
    link = build(
        "link.rate_v",
        lambda: LinkModel(
            rate_v=doc.number("link.rate_v", kind=Fraction),
            startup_s=doc.number("link.startup_s", Fraction(0), kind=Fraction),
            rtt=doc.number("link.rtt", Fraction(0), kind=Fraction),
            per_file_overhead=doc.number("link.per_file_overhead", Fraction(0), kind=Fraction),
        ),
    )
    costs = _costs(doc)
    query = build(
        "plan.training_fraction_p",
        lambda: PlanQuery(
            dataset=dataset,
            training_fraction_p=doc.number("plan.training_fraction_p", kind=Fraction),
            link=link,
            costs=costs,
            experiment_site=doc.get("plan.experiment_site", "ex"),
            datacenter_site=doc.get("plan.datacenter_site", "dc"),
        ),
    )
    for e in doc.unused():
        if e.key.startswith(OWNED_PREFIXES):
            raise ConfigError(f"unknown key {e.key!r}", e.line, doc.source)
    return query


def load_plan_query(path: str | Path) -> PlanQuery:
    return plan_query_from_doc(KVDocument.load(path))


def parse_plan_query(text: str, source: str = "<config>") -> PlanQuery:
    return plan_query_from_doc(KVDocument.parse(text, source))
