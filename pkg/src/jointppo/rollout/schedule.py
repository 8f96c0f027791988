from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a function of environment steps consumed.

    ``exponential`` multiplies by ``decay_rate`` every 1% of ``total_steps``.
    """

    kind: str
    initial: float
    total_steps: int
    decay_rate: float = 0.99

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "exponential"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")

    def __call__(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        if self.kind == "constant":
            return self.initial
        if self.kind == "linear":
            return self.initial * (1.0 - frac)
        return self.initial * self.decay_rate ** (frac * 100.0)
