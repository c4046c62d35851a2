"""Contribution-aware gradient weights from per-type retrieval counts.

The entry type retrieved most often while answering a session's questions is
the dominant contributor; its policy tokens get weight ``alpha`` and every
other type (Core included) gets 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import AlphaOutOfRange
from .memory import CORE, ENTRY_TYPES

# argmax tie-break order
PRIORITY = ENTRY_TYPES  # episodic > semantic > procedural
DEFAULT_ALPHA = 4.0


@dataclass(frozen=True)
class WeightAssignment:
    weights: dict[str, float]
    dominant: str | None

    def __getitem__(self, mem_type: str) -> float:
        return self.weights[mem_type]


def dominant_type(h: Mapping[str, int]) -> str | None:
    """Most-retrieved entry type, or None when nothing was retrieved."""
    counts = {m: h.get(m, 0) for m in PRIORITY}
    if any(c < 0 for c in counts.values()):
        raise ValueError(f"retrieval counts must be non-negative: {counts}")
    best = max(counts.values())
    if best <= 0:
        return None
    return next(m for m in PRIORITY if counts[m] == best)


def assign_weights(d: str | None, alpha: float = DEFAULT_ALPHA, *, unweighted: bool = False) -> WeightAssignment:
    """``unweighted=True`` gives all-ones weights (plain GRPO) whatever ``d`` is."""
    if unweighted:
        return WeightAssignment(dict.fromkeys((CORE, *ENTRY_TYPES), 1.0), None)
    if not alpha > 1:
        raise AlphaOutOfRange(f"alpha must be > 1 (use unweighted mode for 1), got {alpha}")
    if d is not None and d not in ENTRY_TYPES:
        raise ValueError(f"dominant type must be one of {ENTRY_TYPES}, got {d!r}")
    weights = {CORE: 1.0}
    for m in ENTRY_TYPES:
        weights[m] = float(alpha) if m == d else 1.0
    return WeightAssignment(weights, d)


def weights_from_counts(h: Mapping[str, int], alpha: float = DEFAULT_ALPHA) -> WeightAssignment:
    """Convenience: ``alpha == 1`` selects unweighted mode."""
    if alpha == 1:
        return assign_weights(None, unweighted=True)
    return assign_weights(dominant_type(h), alpha)
