#!/usr/bin/env python3
"""Predict total resource utilization of mixed-precision combinations."""

from mixprec import (
    BitwidthCombination,
    ComponentId,
    EstimateOptions,
    ResourceKind,
    bundled_database,
    estimate,
    estimate_uniform,
)

db = bundled_database()

# A mixed combination assigns one bitwidth per key component in pipeline
# order: l_input, add_pe, mha, add_mha, bn_mha, ffn, add_ffn, bn_ffn, gap,
# l_output. The estimate is the sum of the matching database entries.
combo = BitwidthCombination.parse("6,8,6,8,6,6,8,8,8,8")
vec = estimate(db, 12, combo)
print(f"n=12 {combo}:")
print(f"  LUTs {vec.luts}  DRAM {vec.dram}  BRAM {vec.bram}  DSPs {vec.dsps}")

# BRAM and DSPs at exactly 100.0 mean the device is fully committed; values
# above 100 would mean the combination cannot be placed at all.
over = estimate(db, 12, BitwidthCombination.uniform(8))
print(f"n=12 uniform 8-bit: LUTs {over.luts} (infeasible, > 100)")

# Overhead components (interconnect, buffering) can be added on top; their
# column follows the largest bitwidth in the combination by default.
for include in (False, True):
    opts = EstimateOptions(include_overhead=include)
    v = estimate_uniform(db, 12, 4, opts)
    tag = "with" if include else "without"
    print(f"n=12 uniform 4-bit {tag:7s} overhead: LUTs {v.luts}")

# Additivity: raising one component's bitwidth shifts the total by exactly
# the difference of the two database entries.
base = estimate(db, 24, BitwidthCombination.uniform(4))
bits = list(BitwidthCombination.uniform(4).bits)
bits[2] = 8  # mha
raised = estimate(db, 24, BitwidthCombination(tuple(bits)))
delta = raised.luts - base.luts
table_delta = db.lookup(24, ComponentId.MHA, ResourceKind.LUTS, 8) - db.lookup(
    24, ComponentId.MHA, ResourceKind.LUTS, 4
)
print(f"n=24 mha 4->8: LUT delta {delta} == table delta {table_delta}")
