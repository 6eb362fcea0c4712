#!/usr/bin/env python3
"""Sweep all 59,049 combinations under resource thresholds and rank the rest."""

from decimal import Decimal

from mixprec import ResourceKind, Thresholds, bundled_database, search
from mixprec.search import enumerate_all, filter_candidates, histogram

db = bundled_database()

# Thresholds express how much of the device each resource class may use.
# 80% LUTs leaves headroom for other logic; memory and DSPs may saturate.
thresholds = Thresholds.of(80, 100, 100, 100)

for n in (12, 18, 24):
    result = search(db, n, thresholds, top_k=5)
    reduction = result.reduction_pct.quantize(Decimal("0.1"))
    print(
        f"n={n}: {result.filtered_count:5d} of {result.total_count} pass "
        f"(reduction {reduction}%) in {result.runtime_seconds:.2f}s"
    )
    for cand in result.selected:
        e = cand.estimate
        print(
            f"    {cand.combo}  score {cand.score}  "
            f"LUTs {e.luts} DRAM {e.dram} BRAM {e.bram} DSPs {e.dsps}"
        )

# Candidates are ranked by the sum of their ten bitwidths (higher keeps more
# precision), then by estimated LUTs. The distribution of surviving LUT
# estimates shows how much of the feasible space hugs the threshold:
filtered = filter_candidates(db, 12, enumerate_all(), thresholds)
print("\nn=12 LUT histogram over the filtered set:")
for lo, hi, count in histogram(filtered, ResourceKind.LUTS, bins=8):
    bar = "#" * max(1, count // 150)
    print(f"  {lo:>6} .. {hi:>6}: {count:5d} {bar}")
