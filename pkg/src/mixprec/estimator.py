"""Resource utilization estimates for mixed-precision bitwidth combinations.

An estimate is the sum of the per-component database entries selected by the
combination, optionally plus the overhead components. All arithmetic is exact
decimal addition; nothing is rounded until display.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

from .components import (
    KEY_COMPONENTS,
    OVERHEAD_COMPONENTS,
    RESOURCE_ORDER,
    BitwidthCombination,
)
from .knowledge import KnowledgeDatabase, ResourceVector

OVERHEAD_RULE_MAX = "max"
OVERHEAD_RULE_MODE = "mode"
_OVERHEAD_RULES = (OVERHEAD_RULE_MAX, OVERHEAD_RULE_MODE)


@dataclass(frozen=True)
class EstimateOptions:
    """Controls whether and how overhead components enter the sum.

    ``overhead_bitwidth_rule`` picks the database column for the overhead
    components of a mixed combination: ``max`` uses the largest bitwidth in
    the combination (conservative), ``mode`` the most frequent one (ties go
    to the larger bitwidth).
    """

    include_overhead: bool = False
    overhead_bitwidth_rule: str = OVERHEAD_RULE_MAX

    def __post_init__(self) -> None:
        if self.overhead_bitwidth_rule not in _OVERHEAD_RULES:
            raise ValueError(
                f"overhead_bitwidth_rule must be one of {_OVERHEAD_RULES}, "
                f"got {self.overhead_bitwidth_rule!r}"
            )

    def overhead_bitwidth(self, combo: BitwidthCombination) -> int:
        if self.overhead_bitwidth_rule == OVERHEAD_RULE_MAX:
            return max(combo.bits)
        counts = {b: combo.bits.count(b) for b in set(combo.bits)}
        best = max(counts.values())
        return max(b for b, c in counts.items() if c == best)


def estimate(
    db: KnowledgeDatabase,
    seq_len: int,
    combo: BitwidthCombination,
    opts: EstimateOptions = EstimateOptions(),
) -> ResourceVector:
    """Sum per-component utilization for ``combo`` at ``seq_len``."""
    totals = {kind: Decimal(0) for kind in RESOURCE_ORDER}
    for comp, bits in zip(KEY_COMPONENTS, combo.bits):
        for kind in RESOURCE_ORDER:
            totals[kind] += db.lookup(seq_len, comp, kind, bits)
    if opts.include_overhead:
        ob = opts.overhead_bitwidth(combo)
        for comp in OVERHEAD_COMPONENTS:
            for kind in RESOURCE_ORDER:
                totals[kind] += db.lookup(seq_len, comp, kind, ob)
    return ResourceVector(*(totals[kind] for kind in RESOURCE_ORDER))


def estimate_uniform(
    db: KnowledgeDatabase,
    seq_len: int,
    bitwidth: int,
    opts: EstimateOptions = EstimateOptions(),
) -> ResourceVector:
    """Estimate for a uniform-bitwidth model; equals ``estimate`` on the uniform combo."""
    return estimate(db, seq_len, BitwidthCombination.uniform(bitwidth), opts)
