from pathlib import Path

import pytest

from signalvote.sim import Demand, RoadNetwork, SimConfig, TrafficEnv

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"
SCENARIOS = sorted((ROOT / "scenarios").glob("*.json"))


def make_env(rows=1, cols=1, rates=(), vehicles=(), **cfg):
    cfg.setdefault("seed", 0)
    net = RoadNetwork(rows, cols)
    return TrafficEnv(net, SimConfig(**cfg), Demand(rates=tuple(rates), vehicles=tuple(vehicles)))


@pytest.fixture
def empty_env():
    env = make_env(3, 3)
    env.reset()
    return env
