import itertools

import numpy as np
import pytest

from signalvote.mplight import (EmptyMemoryError, MPLightAgent, MPLightConfig, MPLightPolicy,
                                QNetwork, ReplayMemory, ShapeMismatchError, Transition,
                                WeightFormatError, encode_state, greedy, load_weights, save_weights,
                                td_targets)
from signalvote.sim import ObservationState, Phase

from conftest import make_env


def obs(phase=0, queued=(0,) * 8):
    return ObservationState(0, Phase(phase), tuple(queued), ((0, 0, 0),) * 8)


def numeric_grads(net, s, a, y, h=1e-6):
    """Central finite differences of the batch loss, one parameter at a time."""
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + h
            up, _ = net.loss_and_grads(s, a, y)
            p.flat[i] = orig - h
            down, _ = net.loss_and_grads(s, a, y)
            p.flat[i] = orig
            g.flat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_encode_empty():
    assert encode_state(obs(2)).tolist() == [0, 0, 1, 0] + [0] * 8


def test_encode_counts():
    v = encode_state(obs(0, range(1, 9)), capacity=40)
    assert np.allclose(v, [1, 0, 0, 0] + [i / 40 for i in range(1, 9)])


def test_encode_clamps():
    assert encode_state(obs(0, (100,) * 8)).max() == 1.0


def test_encode_injective_on_small_enumeration():
    seen = {}
    for phase in range(4):
        for counts in itertools.product(range(3), repeat=4):
            key = encode_state(obs(phase, counts * 2)).tobytes()
            assert key not in seen
            seen[key] = (phase, counts)


def _fixed_q(agent, q):
    last_w, last_b = agent.qnet.params[-2], agent.qnet.params[-1]
    last_w[...] = 0
    last_b[...] = q


def test_act_greedy_tie_lowest():
    agent = MPLightAgent(MPLightConfig(epsilon_start=0.0, epsilon_min=0.0))
    _fixed_q(agent, [1.0, 2.0, 0.5, 2.0])
    assert agent.act(np.zeros(12), explore=True) is Phase.NLSL
    assert greedy([1.0, 2.0, 0.5, 2.0]) == 1


def test_act_uniform_when_epsilon_one():
    agent = MPLightAgent(seed=4)
    agent.epsilon = 1.0
    counts = np.bincount([agent.act(np.zeros(12)) for _ in range(10_000)], minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) < 3 * sigma)


def test_explore_false_ignores_epsilon():
    agent = MPLightAgent(seed=1)
    agent.epsilon = 1.0
    _fixed_q(agent, [0, 0, 0, 3.0])
    assert {agent.act(np.zeros(12), explore=False) for _ in range(200)} == {Phase.NTST}


def _tr(i):
    return Transition(np.full(12, i, dtype=float), i % 4, -float(i), np.zeros(12))


def test_memory_ring():
    mem = ReplayMemory(capacity=5)
    for i in range(6):
        mem.push(_tr(i))
    assert len(mem) == 5
    assert mem[0].reward == -1.0


def test_memory_empty_sample():
    with pytest.raises(EmptyMemoryError):
        ReplayMemory(3).sample(2)


def test_memory_roundtrip_and_no_replacement():
    mem = ReplayMemory(100, seed=2)
    tr = _tr(7)
    mem.push(tr)
    assert mem[0] is tr
    for i in range(50):
        mem.push(_tr(i))
    batch = mem.sample(32)
    assert len({id(t) for t in batch}) == 32


def test_td_target():
    assert td_targets([-2.0], [1.0], 0.8)[0] == pytest.approx(-1.2)


def test_gradients_match_finite_differences_toy_net():
    rng = np.random.default_rng(0)
    net = QNetwork((12, 4, 4), seed=1, dtype=np.float64)
    s = rng.random((6, 12))
    a = rng.integers(0, 4, 6)
    y = rng.normal(size=6)
    _, grads = net.loss_and_grads(s, a, y)
    for g, n in zip(grads, numeric_grads(net, s, a, y)):
        denom = np.maximum(np.maximum(np.abs(g), np.abs(n)), 1e-6)
        assert np.max(np.abs(g - n) / denom) < 1e-4


def test_single_transition_loss_decreases():
    agent = MPLightAgent(MPLightConfig(batch_size=1, gamma=0.0, target_update=10**6), seed=3)
    s = np.full(12, 0.3)
    agent.store(Transition(s, 2, -10.0, np.zeros(12)))
    q = [agent.q_values(s)[2]]
    losses = []
    for _ in range(100):
        losses.append(agent.train_step())
        q.append(agent.q_values(s)[2])
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert all(b < a for a, b in zip(q, q[1:]))  # Q(s, a) moves steadily down towards y
    assert losses[-1] < losses[0] / 2


def test_train_step_skips_small_memory():
    agent = MPLightAgent()
    agent.store(_tr(1))
    assert agent.train_step() is None


def test_target_net_refresh():
    agent = MPLightAgent(MPLightConfig(batch_size=2, target_update=3), seed=0)
    for i in range(4):
        agent.store(_tr(i))
    before = [p.copy() for p in agent.target_net.params]
    agent.train_step()
    agent.train_step()
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.target_net.params))
    agent.train_step()
    assert all(np.array_equal(a, b) for a, b in zip(agent.qnet.params, agent.target_net.params))


def test_weights_roundtrip(tmp_path):
    agent = MPLightAgent(seed=5)
    path = tmp_path / "w.bin"
    agent.save_weights(path)
    other = MPLightAgent(seed=6)
    other.load_weights(path)
    for a, b in zip(agent.qnet.params, other.qnet.params):
        assert a.tobytes() == b.tobytes()
    states = np.random.default_rng(0).random((100, 12))
    assert np.array_equal(agent.qnet(states), other.qnet(states))


def test_weights_shape_mismatch(tmp_path):
    path = tmp_path / "w.bin"
    save_weights(QNetwork((12, 16, 16, 4)), path)
    with pytest.raises(ShapeMismatchError):
        load_weights(QNetwork((12, 32, 32, 4)), path)


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(WeightFormatError):
        load_weights(QNetwork(), path)


def test_weights_truncated_and_version(tmp_path):
    path = tmp_path / "w.bin"
    save_weights(QNetwork(), path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(WeightFormatError):
        load_weights(QNetwork(), path)
    path.write_bytes(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(WeightFormatError, match="version"):
        load_weights(QNetwork(), path)


def test_weights_shared_across_intersections():
    agent = MPLightAgent()
    pol = MPLightPolicy(agent)
    env = make_env(2, 2)
    states = env.reset()
    assert [pol.decide(s) for s in states]
    # one parameter set: every intersection goes through the same arrays
    assert all(p is q for p, q in zip(pol.agent.qnet.params, agent.qnet.params))


def test_reward_prefers_max_pressure_phase():
    def reward_after(phase):
        env = make_env()
        env.reset()
        for _ in range(5):
            env.place_vehicle(["0:ET"])
            env.place_vehicle(["0:WT"])
        env.place_vehicle(["0:NT"])
        env.step([phase])
        return -env.intersection_pressure(0)

    assert reward_after(Phase.ETWT) >= reward_after(Phase.NLSL)


def test_seeded_training_is_deterministic():
    def weights(seed):
        agent = MPLightAgent(MPLightConfig(batch_size=8), seed=seed)
        rng = np.random.default_rng(0)
        for i in range(40):
            s = rng.random(12)
            agent.store(Transition(s, agent.act(s), -rng.random(), rng.random(12)))
            agent.train_step()
        return [p.copy() for p in agent.qnet.params]

    a, b, c = weights(1), weights(1), weights(2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
