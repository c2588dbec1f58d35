"""Classical controllers: Fixed-Time and Max-Pressure."""

from __future__ import annotations

from typing import Protocol, Sequence

from .sim import ObservationState, Phase


class Policy(Protocol):
    name: str
    is_deterministic: bool

    def decide(self, state: ObservationState) -> Phase: ...


def fixed_decide(t: int, cycle: Sequence[int] = (0, 1, 2, 3)) -> Phase:
    if not cycle:
        raise ValueError("cycle must not be empty")
    return Phase(cycle[t % len(cycle)])


def maxpressure_decide(pressures: Sequence[float]) -> Phase:
    """Phase with the largest pressure; ties go to the lowest index."""
    if len(pressures) != len(Phase):
        raise ValueError(f"expected {len(Phase)} pressures, got {len(pressures)}")
    best = 0
    for i in range(1, len(pressures)):
        if pressures[i] > pressures[best]:
            best = i
    return Phase(best)


class FixedTimePolicy:
    """Cycles through ``cycle``, one entry per decision step, per intersection."""

    name = "fixed"
    is_deterministic = True

    def __init__(self, cycle: Sequence[int] = (0, 1, 2, 3)):
        if not cycle:
            raise ValueError("cycle must not be empty")
        self.cycle = tuple(Phase(p) for p in cycle)
        self._t: dict[int, int] = {}

    def decide(self, state: ObservationState) -> Phase:
        k = state.intersection_id
        t = self._t.get(k, 0)
        self._t[k] = t + 1
        return fixed_decide(t, self.cycle)

    def reset(self) -> None:
        self._t.clear()


class MaxPressurePolicy:
    name = "maxpressure"
    is_deterministic = True

    def decide(self, state: ObservationState) -> Phase:
        return maxpressure_decide(state.phase_pressures)

    def reset(self) -> None:
        pass
