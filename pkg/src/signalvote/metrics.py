"""Travel-time, queue-length and waiting-time statistics for a run."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .sim import ContractError, Vehicle

CSV_FIELDS = ("method", "agents", "seed", "att", "aql", "awt", "n_entered", "n_exited")


@dataclass(frozen=True)
class MetricsReport:
    att: float | None  # None when no vehicle exited
    aql: float
    awt: float | None
    t_total: float
    n_entered: int
    n_exited: int
    queue_trace: tuple[float, ...] = ()  # per-step mean queue per intersection
    wait_trace: tuple[float, ...] = ()  # per-step mean queued seconds per intersection

    @property
    def n_in_network(self) -> int:
        return self.n_entered - self.n_exited

    def to_dict(self, traces: bool = False) -> dict:
        d = asdict(self)
        if not traces:
            d.pop("queue_trace")
            d.pop("wait_trace")
        return d


class MetricsAccumulator:
    def __init__(self, n_intersections: int):
        if n_intersections < 1:
            raise ContractError("need at least one intersection")
        self.K = n_intersections
        self.queue_trace: list[float] = []
        self.wait_trace: list[float] = []
        self.travel_times: list[float] = []
        self.wait_totals: list[float] = []

    @property
    def n_steps(self) -> int:
        return len(self.queue_trace)

    def record_step(self, queues: Sequence[float], waits: Sequence[float]) -> None:
        if len(queues) != self.K or len(waits) != self.K:
            raise ContractError(f"expected {self.K} queue and wait values, "
                                f"got {len(queues)} and {len(waits)}")
        self.queue_trace.append(sum(queues) / self.K)
        self.wait_trace.append(sum(waits) / self.K)

    def record_exit(self, vehicle: Vehicle) -> None:
        if vehicle.exit_time is None:
            raise ContractError(f"vehicle {vehicle.id} has no exit_time")
        self.travel_times.append(vehicle.exit_time - vehicle.entry_time)
        self.wait_totals.append(vehicle.waiting_seconds)

    def finalize(self, n_entered: int | None = None) -> MetricsReport:
        n = len(self.travel_times)
        t_total = math.fsum(self.travel_times)
        att = t_total / n if n else None
        awt = math.fsum(self.wait_totals) / n if n else None
        # network-wide queued vehicles, averaged over decision steps
        aql = (math.fsum(self.queue_trace) * self.K / self.n_steps) if self.n_steps else 0.0
        return MetricsReport(
            att=att,
            aql=aql,
            awt=awt,
            t_total=t_total,
            n_entered=n if n_entered is None else n_entered,
            n_exited=n,
            queue_trace=tuple(self.queue_trace),
            wait_trace=tuple(self.wait_trace),
        )


def _fmt(x: float | None) -> str:
    return "NA" if x is None else f"{x:.3f}"


def report_csv(rows: Sequence[dict]) -> str:
    """One line per run with the :data:`CSV_FIELDS` columns."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (_fmt(row[k]) if k in ("att", "aql", "awt") else row[k]) for k in CSV_FIELDS})
    return buf.getvalue()
