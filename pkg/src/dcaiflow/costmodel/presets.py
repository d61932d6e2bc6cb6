"""The Bragg-peak (HEDM/BraggNN) instance of the cost model.

A datum is an 11x11 patch at 16 bits per pixel, i.e. 242 bytes. The preset
uses an effective datum size of 240 bytes so that moving one datum at 1 GB/s
costs exactly 0.24 us; :data:`PATCH_BYTES` holds the physical size.
"""

from __future__ import annotations

from fractions import Fraction

from dcaiflow.costmodel.model import DatasetSpec, LinkModel, OperationCostTable, OperationKind, UnitCost
from dcaiflow.costmodel.plans import PlanQuery

PATCH_BYTES = 11 * 11 * 2
HEDM_DATUM_BYTES = 240
HEDM_RESULT_BYTES = 8
HEDM_MODEL_BYTES = 3_000_000
HEDM_RATE = 1_000_000_000  # bytes/s
HEDM_RTT = Fraction("0.048")

HEDM_COSTS = OperationCostTable(
    {
        (OperationKind.ANALYZE, "dc"): UnitCost(per_datum_us=Fraction("2.44")),
        (OperationKind.TRAIN, "dc"): UnitCost(fixed_us=19_000_000),
        (OperationKind.ESTIMATE, "ex"): UnitCost(per_datum_us=Fraction("0.35")),
    }
)


def hedm_query(n: int = 0, p: Fraction | float | str = Fraction(1, 10)) -> PlanQuery:
    return PlanQuery(
        dataset=DatasetSpec(
            datum_bytes=HEDM_DATUM_BYTES,
            result_bytes=HEDM_RESULT_BYTES,
            model_bytes=HEDM_MODEL_BYTES,
            count_n=n,
            file_count=1,
        ),
        training_fraction_p=Fraction(str(p)) if isinstance(p, (float, str)) else p,
        link=LinkModel(rate_v=HEDM_RATE, startup_s=0, rtt=HEDM_RTT),
        costs=HEDM_COSTS,
    )


HEDM_CONFIG = """\
# Bragg-peak localisation (HEDM), remote cluster vs. BraggNN surrogate
dataset.datum_bytes = 240        # 11x11 px at 16 bit is 242 B; 240 B gives 0.24 us at 1 GB/s
dataset.result_bytes = 8
dataset.model_bytes = 3000000
dataset.count_n = 1000000
dataset.file_count = 1

link.rate_v = 1e9                # bytes/s
link.startup_s = 0
link.rtt = 0.048

plan.training_fraction_p = 0.1

cost.analyze.dc = 2.44           # us per datum, 1024-core cluster
cost.estimate.ex = 0.35          # us per datum, edge inference
cost.train.dc.fixed = 19000000   # us per training run
"""
