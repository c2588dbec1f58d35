"""Discrete-time queue microsimulation of a signalized grid network.

Each intersection has four approaches (N, E, S, W). An approach carries
three incoming lanes: through, left and right. Through and left lanes are
governed by the four signal phases; right-turn lanes always discharge.

A lane is split into three segments; segment 1 touches the stop line.
Vehicles enter at segment 3, advance one segment per
``segment_traverse_seconds`` and, after crossing segment 1, join the
stop-line queue. Queues discharge one vehicle per ``saturation_headway``
seconds while the lane has right of way.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

APPROACHES = ("N", "E", "S", "W")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
# grid offsets (drow, dcol) for a heading; row 0 is the northern edge
HEADING_OFFSET = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}
_LEFT_OF = {"N": "W", "W": "S", "S": "E", "E": "N"}
_RIGHT_OF = {v: k for k, v in _LEFT_OF.items()}

N_SEGMENTS = 3


class SimError(Exception):
    """Base class for simulation errors."""


class ConfigError(SimError):
    pass


class TopologyError(SimError):
    pass


class ContractError(SimError):
    pass


class Movement(str, enum.Enum):
    THROUGH = "T"
    LEFT = "L"
    RIGHT = "R"


class Phase(enum.IntEnum):
    ELWL = 0  # left turns from east and west
    NLSL = 1  # left turns from north and south
    ETWT = 2  # through traffic from east and west
    NTST = 3  # through traffic from north and south

    @property
    def code(self) -> str:
        return self.name

    @classmethod
    def from_code(cls, code: str) -> "Phase":
        try:
            return cls[code.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown phase code {code!r}") from None


PHASE_LANES: dict[Phase, tuple[tuple[str, Movement], tuple[str, Movement]]] = {
    Phase.ELWL: (("E", Movement.LEFT), ("W", Movement.LEFT)),
    Phase.NLSL: (("N", Movement.LEFT), ("S", Movement.LEFT)),
    Phase.ETWT: (("E", Movement.THROUGH), ("W", Movement.THROUGH)),
    Phase.NTST: (("N", Movement.THROUGH), ("S", Movement.THROUGH)),
}
# observation order of the 8 governed lanes: phase p owns entries 2p and 2p+1
GOVERNED_LANES: tuple[tuple[str, Movement], ...] = tuple(
    lane for phase in Phase for lane in PHASE_LANES[phase]
)


def out_heading(approach: str, movement: Movement) -> str:
    """Heading of a vehicle leaving an intersection it entered from ``approach``."""
    heading = OPPOSITE[approach]
    if movement is Movement.LEFT:
        return _LEFT_OF[heading]
    if movement is Movement.RIGHT:
        return _RIGHT_OF[heading]
    return heading


def lane_id(k: int, approach: str, movement: Movement | str) -> str:
    return f"{k}:{approach}{Movement(movement).value}"


def parse_lane_id(lid: str) -> tuple[int, str, Movement]:
    try:
        k, rest = lid.split(":")
        approach, mv = rest[0], rest[1:]
        if approach not in APPROACHES:
            raise ValueError
        return int(k), approach, Movement(mv)
    except (ValueError, IndexError):
        raise ValueError(f"malformed lane id {lid!r}") from None


@dataclass(slots=True, eq=False)
class Vehicle:
    id: int
    route: tuple[str, ...]
    entry_time: float
    hop: int = 0
    exit_time: float | None = None
    waiting_seconds: float = 0.0
    remaining: float = 0.0  # seconds left in the current segment

    @property
    def lane(self) -> str:
        return self.route[self.hop]

    @property
    def travel_time(self) -> float:
        if self.exit_time is None:
            raise ContractError(f"vehicle {self.id} has not exited")
        return self.exit_time - self.entry_time


@dataclass(eq=False)
class Lane:
    id: str
    intersection: int
    approach: str
    movement: Movement
    capacity_per_segment: int
    # (intersection, approach) receiving this lane's traffic; None = network exit
    downstream: tuple[int, str] | None
    segments: list[deque] = field(default_factory=lambda: [deque() for _ in range(N_SEGMENTS)])
    queue: deque = field(default_factory=deque)
    credit: float = 0.0

    def occupancy(self, seg: int) -> int:
        """Vehicles in segment ``seg`` (0 = segment 1), queued ones included."""
        n = len(self.segments[seg])
        return n + len(self.queue) if seg == 0 else n

    @property
    def n_vehicles(self) -> int:
        return len(self.queue) + sum(len(s) for s in self.segments)

    def clear(self) -> None:
        for s in self.segments:
            s.clear()
        self.queue.clear()
        self.credit = 0.0


@dataclass(eq=False)
class Intersection:
    id: int
    row: int
    col: int
    lanes: dict[tuple[str, Movement], Lane]
    current_phase: Phase = Phase.ELWL
    phase_elapsed: float = 0.0

    def governed(self) -> list[Lane]:
        return [self.lanes[key] for key in GOVERNED_LANES]

    def green(self, lane: Lane) -> bool:
        if lane.movement is Movement.RIGHT:
            return True
        return (lane.approach, lane.movement) in PHASE_LANES[self.current_phase]


class RoadNetwork:
    """Static rows x cols grid topology; intersections are numbered row-major."""

    def __init__(self, rows: int, cols: int, capacity_per_segment: int = 15):
        if rows < 1 or cols < 1:
            raise TopologyError(f"grid must be at least 1x1, got {rows}x{cols}")
        if capacity_per_segment < 1:
            raise TopologyError("capacity_per_segment must be >= 1")
        self.rows = rows
        self.cols = cols
        self.capacity_per_segment = capacity_per_segment
        self.intersections: list[Intersection] = []
        self.lanes: dict[str, Lane] = {}
        for r in range(rows):
            for c in range(cols):
                k = r * cols + c
                lanes = {}
                for a in APPROACHES:
                    for m in Movement:
                        lane = Lane(
                            id=lane_id(k, a, m),
                            intersection=k,
                            approach=a,
                            movement=m,
                            capacity_per_segment=capacity_per_segment,
                            downstream=self.neighbor(k, out_heading(a, m)),
                        )
                        lanes[(a, m)] = lane
                        self.lanes[lane.id] = lane
                self.intersections.append(Intersection(k, r, c, lanes))
        self._check_links()

    @property
    def K(self) -> int:
        return len(self.intersections)

    def neighbor(self, k: int, heading: str) -> tuple[int, str] | None:
        """Intersection reached by leaving ``k`` towards ``heading`` and its entry approach."""
        r, c = divmod(k, self.cols)
        dr, dc = HEADING_OFFSET[heading]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < self.rows and 0 <= c2 < self.cols:
            return r2 * self.cols + c2, OPPOSITE[heading]
        return None

    def is_entry_approach(self, k: int, approach: str) -> bool:
        # vehicles arriving from `approach` travel towards OPPOSITE[approach]
        return self.neighbor(k, approach) is None

    def entry_lanes(self) -> list[Lane]:
        return [lane for lane in self.lanes.values()
                if self.is_entry_approach(lane.intersection, lane.approach)]

    def receiving_lanes(self, lane: Lane) -> list[Lane]:
        if lane.downstream is None:
            return []
        k2, a2 = lane.downstream
        return [self.intersections[k2].lanes[(a2, m)] for m in Movement]

    def next_lane_ok(self, lane_a: str, lane_b: str) -> bool:
        """True when a vehicle discharged from ``lane_a`` may enter ``lane_b``."""
        a = self.lanes.get(lane_a)
        b = self.lanes.get(lane_b)
        if a is None or b is None or a.downstream is None:
            return False
        return a.downstream == (b.intersection, b.approach)

    def _check_links(self) -> None:
        for lane in self.lanes.values():
            if lane.downstream is None:
                continue
            k2, a2 = lane.downstream
            if not 0 <= k2 < self.K or (a2, Movement.THROUGH) not in self.intersections[k2].lanes:
                raise TopologyError(f"lane {lane.id} links to missing {lane.downstream}")
            back = self.neighbor(k2, a2)
            if back is None or back[0] != lane.intersection:
                raise TopologyError(f"link from {lane.id} is not bidirectional")


@dataclass(frozen=True)
class SimConfig:
    tick_seconds: float = 1.0
    tau_seconds: float = 30.0
    duration_seconds: float = 3600.0
    saturation_headway: float = 2.0
    segment_traverse_seconds: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("tick_seconds", "tau_seconds", "duration_seconds",
                     "saturation_headway", "segment_traverse_seconds"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not _is_multiple(self.tau_seconds, self.tick_seconds):
            raise ConfigError("tau_seconds must be an integer multiple of tick_seconds")
        if not _is_multiple(self.duration_seconds, self.tau_seconds):
            raise ConfigError("duration_seconds must be an integer multiple of tau_seconds")

    @property
    def ticks_per_step(self) -> int:
        return round(self.tau_seconds / self.tick_seconds)

    @property
    def n_steps(self) -> int:
        return round(self.duration_seconds / self.tau_seconds)


def _is_multiple(x: float, unit: float) -> bool:
    q = x / unit
    return abs(q - round(q)) < 1e-9 and round(q) >= 1


@dataclass(frozen=True)
class ObservationState:
    intersection_id: int
    current_phase: Phase
    queued_per_lane: tuple[int, ...]  # GOVERNED_LANES order
    approaching_per_lane_per_segment: tuple[tuple[int, int, int], ...]  # segment 1 first
    phase_pressures: tuple[int, int, int, int] = (0, 0, 0, 0)

    def lane_totals(self) -> tuple[int, ...]:
        return tuple(q + sum(a) for q, a in
                     zip(self.queued_per_lane, self.approaching_per_lane_per_segment))


@dataclass(frozen=True)
class Demand:
    """Arrival demand: Poisson rates per entry lane plus explicit vehicles.

    An entry key is either a lane id (``"3:WT"``) or a road id (``"3:W"``);
    for a road the first movement is sampled like every later one.
    """

    rates: tuple[tuple[str, float], ...] = ()
    vehicles: tuple[tuple[float, tuple[str, ...]], ...] = ()
    turn_probability: float = 0.1


class TrafficEnv:
    """Stepped environment: ``reset`` then ``step`` once per decision (every tau seconds)."""

    def __init__(self, network: RoadNetwork, config: SimConfig, demand: Demand | None = None,
                 record_events: bool = True):
        config.validate()
        self.network = network
        self.config = config
        self.demand = demand or Demand()
        self.record_events = record_events
        self._entries = []
        for key, lam in self.demand.rates:
            if lam < 0:
                raise ConfigError(f"negative arrival rate on {key}")
            self._entries.append((key, float(lam), self._resolve_entry(key)))
        for _, route in self.demand.vehicles:
            self._check_route(route)
        self.clock = 0.0
        self._started = False

    # -- setup -------------------------------------------------------------

    def _resolve_entry(self, key: str) -> tuple[int, str, Movement | None]:
        k_str, _, rest = key.partition(":")
        try:
            k = int(k_str)
        except ValueError:
            raise TopologyError(f"bad entry {key!r}") from None
        if not 0 <= k < self.network.K or not rest or rest[0] not in APPROACHES:
            raise TopologyError(f"entry {key!r} is not in the network")
        approach = rest[0]
        if not self.network.is_entry_approach(k, approach):
            raise TopologyError(f"entry {key!r} is not on the network boundary")
        movement = Movement(rest[1:]) if len(rest) > 1 else None
        return k, approach, movement

    def _check_route(self, route: Sequence[str]) -> None:
        if not route:
            raise TopologyError("empty route")
        for lid in route:
            if lid not in self.network.lanes:
                raise TopologyError(f"route lane {lid} not in network")
        for a, b in zip(route, route[1:]):
            if not self.network.next_lane_ok(a, b):
                raise TopologyError(f"route step {a} -> {b} is not connected")
        if self.network.lanes[route[-1]].downstream is not None:
            raise TopologyError(f"route ends at {route[-1]}, which does not leave the network")

    def reset(self) -> list[ObservationState]:
        self.rng = np.random.default_rng(self.config.seed)
        self.clock = 0.0
        self._started = True
        self._next_vid = 0
        for lane in self.network.lanes.values():
            lane.clear()
        for node in self.network.intersections:
            node.current_phase = Phase.ELWL
            node.phase_elapsed = 0.0
        self.backlog: dict[str, deque] = {}
        self.n_entered = 0
        self.n_exited = 0
        self.n_on_network = 0
        self.exited: list[Vehicle] = []
        self._fresh_exits: list[Vehicle] = []
        self._step_waits = [0.0] * self.network.K
        self._explicit = deque(sorted(self.demand.vehicles, key=lambda v: v[0]))
        self.events: list[tuple] = []
        self.steps_done = 0
        return self.observe_all()

    # -- public stepping ---------------------------------------------------

    @property
    def done(self) -> bool:
        return self.steps_done >= self.config.n_steps

    def step(self, actions: Sequence[int], on_tick: Callable[["TrafficEnv"], None] | None = None
             ) -> list[ObservationState]:
        if not self._started:
            raise ContractError("step() called before reset()")
        if len(actions) != self.network.K:
            raise ContractError(f"expected {self.network.K} actions, got {len(actions)}")
        if self.done:
            raise ContractError("simulation already reached its duration")
        for node, a in zip(self.network.intersections, actions):
            phase = Phase(int(a))
            if phase != node.current_phase:
                node.current_phase = phase
                node.phase_elapsed = 0.0
            self._log(self.clock, "phase", node.id, int(phase))
        self._step_waits = [0.0] * self.network.K
        for _ in range(self.config.ticks_per_step):
            self._tick()
            if on_tick is not None:
                on_tick(self)
        self.steps_done += 1
        return self.observe_all()

    def observe(self, k: int) -> ObservationState:
        if not 0 <= k < self.network.K:
            raise KeyError(f"no intersection {k}")
        node = self.network.intersections[k]
        lanes = node.governed()
        return ObservationState(
            intersection_id=k,
            current_phase=node.current_phase,
            queued_per_lane=tuple(len(lane.queue) for lane in lanes),
            approaching_per_lane_per_segment=tuple(
                tuple(len(s) for s in lane.segments) for lane in lanes),
            phase_pressures=tuple(self.pressure(k, p) for p in Phase),
        )

    def observe_all(self) -> list[ObservationState]:
        return [self.observe(k) for k in range(self.network.K)]

    def pressure(self, k: int, phase: int) -> int:
        """Sum over the phase's two lanes of own queue minus receiving-road queue."""
        node = self.network.intersections[k]
        total = 0
        for key in PHASE_LANES[Phase(phase)]:
            lane = node.lanes[key]
            total += len(lane.queue)
            total -= sum(len(r.queue) for r in self.network.receiving_lanes(lane))
        return total

    def intersection_pressure(self, k: int) -> int:
        return sum(self.pressure(k, p) for p in Phase)

    def queue_lengths(self) -> list[int]:
        return [sum(len(lane.queue) for lane in node.lanes.values())
                for node in self.network.intersections]

    def step_waits(self) -> list[float]:
        """Queued seconds accrued per intersection during the last step."""
        return list(self._step_waits)

    def pop_exited(self) -> list[Vehicle]:
        out, self._fresh_exits = self._fresh_exits, []
        return out

    def backlog_size(self) -> int:
        return sum(len(q) for q in self.backlog.values())

    def conservation(self) -> tuple[int, int, int, int]:
        """(entered, exited, on_network, backlog); entered == sum of the others."""
        on_net = sum(lane.n_vehicles for lane in self.network.lanes.values())
        return self.n_entered, self.n_exited, on_net, self.backlog_size()

    # -- test fixtures -----------------------------------------------------

    def place_vehicle(self, route: Sequence[str], segment: int | None = None) -> Vehicle:
        """Put a vehicle directly on its first lane; ``segment=None`` queues it."""
        self._check_route(route)
        v = self._new_vehicle(tuple(route))
        lane = self.network.lanes[v.lane]
        seg = 0 if segment is None else segment - 1
        if lane.occupancy(seg) >= lane.capacity_per_segment:
            raise ContractError(f"segment {seg + 1} of {lane.id} is full")
        if segment is None:
            lane.queue.append(v)
        else:
            v.remaining = self.config.segment_traverse_seconds
            lane.segments[seg].append(v)
        self.n_on_network += 1
        return v

    # -- internals ---------------------------------------------------------

    def _log(self, *event) -> None:
        if self.record_events:
            self.events.append(event)

    def _new_vehicle(self, route: tuple[str, ...]) -> Vehicle:
        v = Vehicle(id=self._next_vid, route=route, entry_time=self.clock)
        self._next_vid += 1
        self.n_entered += 1
        self._log(self.clock, "spawn", v.id, route[0])
        return v

    def _sample_route(self, k: int, approach: str, first: Movement | None) -> tuple[str, ...]:
        net = self.network
        p = self.demand.turn_probability
        limit = 2 * (net.rows + net.cols) + 4
        route = []
        movement = first
        while True:
            if movement is None:
                if len(route) >= limit:
                    movement = Movement.THROUGH
                else:
                    u = self.rng.random()
                    movement = (Movement.LEFT if u < p / 2 else
                                Movement.RIGHT if u < p else Movement.THROUGH)
            lane = net.intersections[k].lanes[(approach, movement)]
            route.append(lane.id)
            if lane.downstream is None:
                return tuple(route)
            k, approach = lane.downstream
            movement = None

    def _spawn_arrivals(self) -> None:
        tick = self.config.tick_seconds
        for key, lam, (k, approach, first) in self._entries:
            if lam <= 0:
                continue
            for _ in range(int(self.rng.poisson(lam * tick))):
                v = self._new_vehicle(self._sample_route(k, approach, first))
                self.backlog.setdefault(v.lane, deque()).append(v)
        while self._explicit and self._explicit[0][0] < self.clock + tick - 1e-9:
            _, route = self._explicit.popleft()
            v = self._new_vehicle(tuple(route))
            self.backlog.setdefault(v.lane, deque()).append(v)
        for lid, waiting in self.backlog.items():
            lane = self.network.lanes[lid]
            seg = lane.segments[N_SEGMENTS - 1]
            while waiting and len(seg) < lane.capacity_per_segment:
                v = waiting.popleft()
                v.remaining = self.config.segment_traverse_seconds
                seg.append(v)
                self.n_on_network += 1
                self._log(self.clock, "enter", v.id, lid)

    def _tick(self) -> None:
        cfg = self.config
        tick = cfg.tick_seconds
        t_end = self.clock + tick
        net = self.network
        lanes = net.lanes

        self._spawn_arrivals()

        # discharge; receiving segment-3 slots are reserved until placement below
        moves: list[tuple[Vehicle, Lane | None, Lane]] = []
        reserved: dict[str, int] = {}
        for node in net.intersections:
            for lane in node.lanes.values():
                if not node.green(lane):
                    lane.credit = 0.0
                    continue
                if not lane.queue:
                    lane.credit = min(lane.credit + tick, cfg.saturation_headway)
                    continue
                lane.credit += tick
                while lane.queue and lane.credit >= cfg.saturation_headway - 1e-9:
                    v = lane.queue[0]
                    target = None
                    if v.hop + 1 < len(v.route):
                        target = lanes[v.route[v.hop + 1]]
                        if target.id not in lanes or not net.next_lane_ok(lane.id, target.id):
                            raise TopologyError(f"vehicle {v.id} cannot reach {target.id}")
                        used = len(target.segments[N_SEGMENTS - 1]) + reserved.get(target.id, 0)
                        if used >= target.capacity_per_segment:
                            break
                        reserved[target.id] = reserved.get(target.id, 0) + 1
                    elif lane.downstream is not None:
                        raise TopologyError(f"vehicle {v.id} route ends inside the network")
                    lane.queue.popleft()
                    lane.credit -= cfg.saturation_headway
                    moves.append((v, target, lane))
                    self._log(self.clock, "discharge", v.id, lane.id)
                if lane.credit > cfg.saturation_headway:
                    lane.credit = cfg.saturation_headway

        # advance approaching vehicles, nearest segment first so space frees up-front
        for lane in lanes.values():
            segs = lane.segments
            if not (segs[0] or segs[1] or segs[2]):
                continue
            for s in range(N_SEGMENTS):
                seg = segs[s]
                moving = True
                while seg:
                    v = seg[0]
                    if not moving or v.remaining > tick + 1e-9:
                        break
                    if s == 0:
                        seg.popleft()
                        v.remaining = 0.0
                        lane.queue.append(v)
                        self._log(t_end, "queue", v.id, lane.id)
                    elif lane.occupancy(s - 1) < lane.capacity_per_segment:
                        seg.popleft()
                        v.remaining = cfg.segment_traverse_seconds
                        segs[s - 1].append(v)
                    else:
                        v.remaining = 0.0
                        moving = False
                for i, v in enumerate(seg):
                    if v.remaining > 0:
                        v.remaining = max(v.remaining - tick, 0.0)

        # waiting: time spent in the stop-line queue
        for node in net.intersections:
            acc = 0.0
            for lane in node.lanes.values():
                n = len(lane.queue)
                if n:
                    for v in lane.queue:
                        v.waiting_seconds += tick
                    acc += n * tick
            self._step_waits[node.id] += acc
            node.phase_elapsed += tick

        # place discharged vehicles downstream or take them off the network
        for v, target, origin in moves:
            if target is None:
                v.exit_time = t_end
                self.n_exited += 1
                self.n_on_network -= 1
                self.exited.append(v)
                self._fresh_exits.append(v)
                self._log(t_end, "exit", v.id, origin.id)
            else:
                v.hop += 1
                v.remaining = cfg.segment_traverse_seconds
                target.segments[N_SEGMENTS - 1].append(v)

        self.clock = t_end


def build_env(rows: int, cols: int, config: SimConfig | None = None,
              rates: Iterable[tuple[str, float]] = (), **net_kwargs) -> TrafficEnv:
    network = RoadNetwork(rows, cols, **net_kwargs)
    return TrafficEnv(network, config or SimConfig(), Demand(rates=tuple(rates)))
