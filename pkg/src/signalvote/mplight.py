"""Pressure-based deep Q-learning agent with a parameter set shared by all intersections.

The Q-network is a plain fully connected ReLU net written against numpy so
the gradients can be checked directly against finite differences.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import GOVERNED_LANES, ObservationState, Phase

N_ACTIONS = len(Phase)
STATE_DIM = N_ACTIONS + len(GOVERNED_LANES)
DEFAULT_CAPACITY = 40.0

WEIGHTS_MAGIC = b"SVQN"
WEIGHTS_VERSION = 1


class WeightFormatError(ValueError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class EmptyMemoryError(LookupError):
    pass


def encode_state(obs: ObservationState, capacity: float = DEFAULT_CAPACITY) -> np.ndarray:
    """One-hot phase followed by per-governed-lane vehicle counts / capacity, clamped to [0, 1]."""
    vec = np.zeros(STATE_DIM, dtype=np.float64)
    vec[int(obs.current_phase)] = 1.0
    counts = np.asarray(obs.lane_totals(), dtype=np.float64)
    vec[N_ACTIONS:] = np.clip(counts / capacity, 0.0, 1.0)
    return vec


def td_targets(rewards, next_q_max, gamma: float) -> np.ndarray:
    return np.asarray(rewards, dtype=np.float64) + gamma * np.asarray(next_q_max, dtype=np.float64)


def greedy(q: Sequence[float]) -> int:
    # np.argmax returns the first maximum, i.e. the lowest phase index on ties
    return int(np.argmax(q))


class QNetwork:
    """Fully connected net ``sizes[0] -> ... -> sizes[-1]`` with ReLU hidden layers."""

    def __init__(self, sizes: Sequence[int] = (STATE_DIM, 32, 32, N_ACTIONS),
                 seed: int | np.random.Generator | None = 0, dtype=np.float32):
        self.sizes = tuple(int(s) for s in sizes)
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            # He-uniform init
            bound = np.sqrt(6.0 / fan_in)
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.sizes, other.dtype = self.sizes, self.dtype
        other.params = [p.copy() for p in self.params]
        return other

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ShapeMismatchError(f"shape {src.shape} != {dst.shape}")
            dst[...] = src

    def forward(self, x: np.ndarray, cache: bool = False):
        h = np.asarray(x, dtype=self.dtype)
        acts = [h]
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            h = np.maximum(z, 0) if i < self.n_layers - 1 else z
            acts.append(h)
        return (h, acts) if cache else h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def loss_and_grads(self, states: np.ndarray, actions: np.ndarray, targets: np.ndarray
                       ) -> tuple[float, list[np.ndarray]]:
        """Mean squared TD error on the chosen actions and its parameter gradients."""
        states = np.atleast_2d(states)
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=self.dtype)
        q, acts = self.forward(states, cache=True)
        B = states.shape[0]
        rows = np.arange(B)
        err = q[rows, actions] - targets
        loss = float(np.mean(err.astype(np.float64) ** 2))
        delta = np.zeros_like(q)
        delta[rows, actions] = 2.0 * err / B
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ W.T) * (acts[i] > 0)
        return loss, grads


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


class ReplayMemory:
    """Fixed-capacity ring buffer with uniform sampling without replacement."""

    def __init__(self, capacity: int = 10_000, seed: int | np.random.Generator | None = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[Transition] = deque(maxlen=capacity)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> Transition:
        return self._buf[i]

    def push(self, tr: Transition) -> None:
        self._buf.append(tr)

    def sample(self, batch_size: int) -> list[Transition]:
        if not self._buf:
            raise EmptyMemoryError("replay memory is empty")
        n = min(batch_size, len(self._buf))
        idx = self.rng.choice(len(self._buf), size=n, replace=False)
        return [self._buf[i] for i in idx]


@dataclass
class MPLightConfig:
    hidden: int = 32
    learning_rate: float = 0.001
    gamma: float = 0.8
    batch_size: int = 32
    memory_capacity: int = 10_000
    target_update: int = 100
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay_steps: int = 1000
    capacity_norm: float = DEFAULT_CAPACITY


class MPLightAgent:
    """DQN agent whose single Q-network serves every intersection it controls.

    Independent agents differ only through their seed, which drives the
    weight init, the epsilon draws and replay sampling.
    """

    def __init__(self, config: MPLightConfig | None = None, seed: int = 0):
        self.config = cfg = config or MPLightConfig()
        ss = np.random.SeedSequence(seed)
        init_ss, act_ss, mem_ss = ss.spawn(3)
        self.qnet = QNetwork((STATE_DIM, cfg.hidden, cfg.hidden, N_ACTIONS),
                             seed=np.random.default_rng(init_ss))
        self.target_net = self.qnet.copy()
        self.optimizer = Adam(self.qnet.params, lr=cfg.learning_rate)
        self.memory = ReplayMemory(cfg.memory_capacity, seed=np.random.default_rng(mem_ss))
        self.rng = np.random.default_rng(act_ss)
        self.epsilon = cfg.epsilon_start
        self.act_steps = 0
        self.train_steps = 0

    def update_epsilon(self) -> None:
        cfg = self.config
        frac = min(self.act_steps / max(cfg.epsilon_decay_steps, 1), 1.0)
        self.epsilon = cfg.epsilon_start + frac * (cfg.epsilon_min - cfg.epsilon_start)

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return self.qnet(state)

    def act(self, state: np.ndarray, explore: bool = True) -> Phase:
        if explore:
            draw = self.rng.random()
            choice = int(self.rng.integers(N_ACTIONS))
            if draw < self.epsilon:
                return Phase(choice)
        return Phase(greedy(self.qnet(state)))

    def store(self, tr: Transition) -> None:
        self.memory.push(tr)

    def train_step(self) -> float | None:
        """One gradient step on a sampled batch; None when memory is still too small."""
        cfg = self.config
        if len(self.memory) < cfg.batch_size:
            return None
        batch = self.memory.sample(cfg.batch_size)
        s = np.stack([t.state for t in batch])
        a = np.array([t.action for t in batch])
        r = np.array([t.reward for t in batch])
        s2 = np.stack([t.next_state for t in batch])
        y = td_targets(r, self.target_net(s2).max(axis=1), cfg.gamma)
        loss, grads = self.qnet.loss_and_grads(s, a, y)
        self.optimizer.step(grads)
        self.train_steps += 1
        if self.train_steps % cfg.target_update == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target_net.load_params(self.qnet.params)

    def save_weights(self, path: str | Path) -> None:
        save_weights(self.qnet, path)

    def load_weights(self, path: str | Path) -> None:
        load_weights(self.qnet, path)
        self.sync_target()


class MPLightPolicy:
    """Policy view of an agent; several views may share one agent (and its weights)."""

    name = "mplight"

    def __init__(self, agent: MPLightAgent, explore: bool = False):
        self.agent = agent
        self.explore = explore

    @property
    def is_deterministic(self) -> bool:
        return not self.explore

    def decide(self, state: ObservationState) -> Phase:
        return self.agent.act(encode_state(state, self.agent.config.capacity_norm), self.explore)

    def reset(self) -> None:
        pass


# weight file: magic, u16 version, u16 n_layers, (u32 rows, u32 cols) per layer,
# then per layer W (row-major) and b as little-endian float32

def save_weights(net: QNetwork, path: str | Path) -> None:
    out = bytearray(WEIGHTS_MAGIC)
    out += struct.pack("<HH", WEIGHTS_VERSION, net.n_layers)
    for i in range(net.n_layers):
        out += struct.pack("<II", *net.params[2 * i].shape)
    for p in net.params:
        out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def read_weights(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightFormatError(f"{path}: bad magic header")
    try:
        version, n_layers = struct.unpack_from("<HH", data, 4)
        if version != WEIGHTS_VERSION:
            raise WeightFormatError(f"{path}: unsupported version {version}")
        shapes = [struct.unpack_from("<II", data, 8 + 8 * i) for i in range(n_layers)]
    except struct.error as exc:
        raise WeightFormatError(f"{path}: truncated header") from exc
    offset = 8 + 8 * n_layers
    params = []
    for rows, cols in shapes:
        for shape in ((rows, cols), (cols,)):
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(data):
                raise WeightFormatError(f"{path}: truncated payload")
            params.append(np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).copy())
            offset = end
    if offset != len(data):
        raise WeightFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return params


def load_weights(net: QNetwork, path: str | Path) -> None:
    params = read_weights(path)
    if len(params) != len(net.params):
        raise ShapeMismatchError(f"{path}: {len(params) // 2} layers, network has {net.n_layers}")
    for p, q in zip(params, net.params):
        if p.shape != q.shape:
            raise ShapeMismatchError(f"{path}: layer shape {p.shape} != {q.shape}")
    net.load_params([p.astype(net.dtype) for p in params])
