"""Discrete event signals passed from the EMT engine to the phasor models."""
from __future__ import annotations

from dataclasses import dataclass

SIGNAL_KINDS = ("motor_stall", "motor_run", "breaker", "generic_control")


@dataclass(frozen=True, order=True)
class EventSignal:
    t_emt: float
    target: str
    kind: str = "motor_stall"
    phase: str = ""
    value: str = "stalled"
    source: str = "emt"

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")

    @property
    def sort_key(self):
        return (self.t_emt, self.source, self.target)
