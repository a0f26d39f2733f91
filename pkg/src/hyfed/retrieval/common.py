from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass
class ScoredCandidate:
    uid: str
    score: float
    signals: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.uid}")


def check_weight(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def weighted(alpha: float, a: float, b: float) -> float:
    """alpha * a + (1 - alpha) * b, with the boundary cases returning an operand exactly."""
    check_weight("alpha", alpha)
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return alpha * a + (1.0 - alpha) * b
