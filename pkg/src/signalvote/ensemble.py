"""Sampling-and-voting over N independent agents.

Every agent proposes a phase for an intersection; the phase with the most
votes is executed. Ties go to the lowest phase index, so the outcome never
depends on the order in which agents were queried.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, Sequence

from .policies import Policy
from .sim import ContractError, ObservationState, Phase

N_PHASES = len(Phase)


@dataclass(frozen=True)
class VoteRecord:
    intersection_id: int
    proposals: tuple[int, ...]
    tally: tuple[int, ...]
    chosen: Phase

    @property
    def unanimous(self) -> bool:
        return self.tally[self.chosen] == len(self.proposals)

    def to_json(self) -> str:
        return json.dumps({
            "intersection": self.intersection_id,
            "proposals": list(self.proposals),
            "tally": list(self.tally),
            "chosen": int(self.chosen),
            "unanimous": self.unanimous,
        }, sort_keys=True)


def majority_vote(proposals: Sequence[int], intersection_id: int = -1) -> tuple[Phase, VoteRecord]:
    if len(proposals) == 0:
        raise ContractError("majority_vote needs at least one proposal")
    tally = [0] * N_PHASES
    for p in proposals:
        tally[Phase(int(p))] += 1
    chosen = Phase(tally.index(max(tally)))  # index() finds the lowest tied phase
    rec = VoteRecord(intersection_id, tuple(int(p) for p in proposals), tuple(tally), chosen)
    return chosen, rec


def sample_actions(agents: Sequence[Policy], state: ObservationState) -> list[Phase]:
    return [Phase(agent.decide(state)) for agent in agents]


class EnsembleController:
    """N agents voting independently at each intersection.

    With ``max_workers > 1`` agents are queried in parallel threads; each
    agent still sees the intersections in order, so seeded agents stay
    reproducible.
    """

    def __init__(self, agents: Sequence[Policy], max_workers: int = 1):
        if not agents:
            raise ContractError("an ensemble needs at least one agent")
        self.agents = list(agents)
        self.max_workers = max_workers
        self.records: list[VoteRecord] = []
        self._log: IO[str] | None = None

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def name(self) -> str:
        names = sorted({getattr(a, "name", type(a).__name__) for a in self.agents})
        return "+".join(names)

    def stream_to(self, fh: IO[str] | None) -> None:
        self._log = fh

    def decide_all(self, states: Sequence[ObservationState]) -> tuple[list[Phase], list[VoteRecord]]:
        if self.max_workers > 1 and self.N > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                per_agent = list(pool.map(lambda a: [Phase(a.decide(s)) for s in states], self.agents))
        else:
            per_agent = [[Phase(a.decide(s)) for s in states] for a in self.agents]
        actions, records = [], []
        for j, state in enumerate(states):
            proposals = [per_agent[i][j] for i in range(self.N)]
            chosen, rec = majority_vote(proposals, state.intersection_id)
            actions.append(chosen)
            records.append(rec)
        self.records.extend(records)
        if self._log is not None:
            for rec in records:
                self._log.write(rec.to_json() + "\n")
        return actions, records

    def reset(self) -> None:
        self.records.clear()
        for a in self.agents:
            if hasattr(a, "reset"):
                a.reset()

    def unanimity_rate(self) -> float | None:
        if not self.records:
            return None
        return sum(r.unanimous for r in self.records) / len(self.records)


class BareController:
    """Single policy without voting; the reference an N=1 ensemble must reproduce."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.agents = [policy]

    @property
    def name(self) -> str:
        return self.policy.name

    def decide_all(self, states: Sequence[ObservationState]) -> tuple[list[Phase], list]:
        return [Phase(self.policy.decide(s)) for s in states], []

    def reset(self) -> None:
        if hasattr(self.policy, "reset"):
            self.policy.reset()
