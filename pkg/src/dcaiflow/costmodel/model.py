from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from dcaiflow.timebase import NS_PER_S, Number, exact

SiteId = str


class ParameterError(ValueError):
    """Raised for parameter values outside a type's invariants."""


class MissingCostError(LookupError):
    """No cost-table entry for a (kind, site) pair an evaluator needs."""

    def __init__(self, kind: "OperationKind", site: SiteId):
        super().__init__(f"no cost entry for {kind.name} at site {site!r}")
        self.kind = kind
        self.site = site


class OperationKind(enum.Enum):
    COLLECT = "collect"
    SIMULATE = "simulate"
    ANALYZE = "analyze"
    TRAIN = "train"
    DEPLOY = "deploy"
    ESTIMATE = "estimate"


@dataclass(frozen=True)
class UnitCost:
    """Cost of one operation at one site, in microseconds.

    ``per_datum_us`` is charged per datum processed; ``fixed_us`` once per
    invocation (training is modelled as fixed-only).
    """

    per_datum_us: Number = 0
    fixed_us: Number = 0

    def __post_init__(self) -> None:
        if exact(self.per_datum_us) < 0 or exact(self.fixed_us) < 0:
            raise ParameterError(f"costs must be non-negative: {self}")

    def seconds(self, count: int | Fraction) -> Fraction:
        return (exact(self.per_datum_us) * count + exact(self.fixed_us)) / 1_000_000

    def scaled(self, k: Number) -> "UnitCost":
        k = exact(k)
        return UnitCost(exact(self.per_datum_us) * k, exact(self.fixed_us) * k)


@dataclass(frozen=True)
class OperationCostTable:
    entries: Mapping[tuple[OperationKind, SiteId], UnitCost] = field(default_factory=dict)

    def lookup(self, kind: OperationKind, site: SiteId) -> UnitCost:
        try:
            return self.entries[(kind, site)]
        except KeyError:
            raise MissingCostError(kind, site) from None

    def has(self, kind: OperationKind, site: SiteId) -> bool:
        return (kind, site) in self.entries

    def with_entry(self, kind: OperationKind, site: SiteId, cost: UnitCost) -> "OperationCostTable":
        return OperationCostTable({**self.entries, (kind, site): cost})

    def without(self, kind: OperationKind, site: SiteId) -> "OperationCostTable":
        return OperationCostTable({k: v for k, v in self.entries.items() if k != (kind, site)})

    def scaled(self, k: Number) -> "OperationCostTable":
        return OperationCostTable({key: c.scaled(k) for key, c in self.entries.items()})


@dataclass(frozen=True)
class LinkModel:
    """Linear wide-area transfer model.

    ``rate_v`` is bytes/s, ``startup_s`` the fixed per-transfer cost and
    ``per_file_overhead`` seconds per file. ``rtt`` is kept for reporting and
    real-mode WAN emulation; the linear model assumes it is already folded
    into ``startup_s``.
    """

    rate_v: Number
    startup_s: Number = 0
    rtt: Number = 0
    per_file_overhead: Number = 0

    def __post_init__(self) -> None:
        if exact(self.rate_v) <= 0:
            raise ParameterError(f"rate_v must be > 0, got {self.rate_v}")
        for name in ("startup_s", "rtt", "per_file_overhead"):
            if exact(getattr(self, name)) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")

    def replace(self, **changes: Number) -> "LinkModel":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DatasetSpec:
    datum_bytes: int
    result_bytes: int
    model_bytes: int
    count_n: int
    file_count: int = 1

    def __post_init__(self) -> None:
        for name in ("datum_bytes", "result_bytes", "model_bytes"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")
        if self.count_n < 0:
            raise ParameterError("count_n must be >= 0")
        if self.file_count < 0 or (self.count_n > 0 and self.file_count < 1):
            raise ParameterError("file_count must be >= 1 when count_n > 0")

    def with_count(self, n: int) -> "DatasetSpec":
        return dataclasses.replace(self, count_n=n)


def transfer_exact(nbytes: int, file_count: int, link: LinkModel) -> Fraction:
    """Transfer time in seconds as an exact rational."""
    if not isinstance(link, LinkModel):
        raise ParameterError("link must be a LinkModel")
    if nbytes < 0 or file_count < 0:
        raise ParameterError("bytes and file_count must be >= 0")
    if nbytes == 0 and file_count == 0:
        return Fraction(0)
    return (
        Fraction(nbytes) / exact(link.rate_v)
        + exact(link.startup_s)
        + file_count * exact(link.per_file_overhead)
    )


def transfer_time(nbytes: int, file_count: int, link: LinkModel) -> float:
    """Seconds to move *nbytes* held in *file_count* files over *link*.

    >>> transfer_time(3_000_000, 1, LinkModel(rate_v=1e9))
    0.003
    """
    return float(transfer_exact(nbytes, file_count, link))


def transfer_time_ns(nbytes: int, file_count: int, link: LinkModel) -> int:
    return math.ceil(transfer_exact(nbytes, file_count, link) * NS_PER_S)
