"""End-to-end acceptance checks; each prints one PASS/FAIL line (see them with ``-s``)."""

import math
import shutil
import statistics
import time
from bisect import bisect_left, bisect_right
from collections import Counter
from contextlib import contextmanager

import numpy as np
import pytest

from signalvote.ensemble import EnsembleController, majority_vote
from signalvote.harness import (LLMSettings, MPLightSettings, RunConfig, execute, make_env, run,
                                train_mplight)
from signalvote.llm import ParseError, ScriptedBackend, build_prompt, decide_with_fallback, parse_signal
from signalvote.mplight import MPLightPolicy, QNetwork
from signalvote.scenario import SyntheticGridSpec
from signalvote.sim import ObservationState, Phase

from conftest import DATA, ROOT, SCENARIOS


@contextmanager
def criterion(number, title, limit_seconds):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < limit_seconds
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} "
              f"({elapsed:.2f}s, limit {limit_seconds}s)")
    assert elapsed < limit_seconds, f"took {elapsed:.2f}s"


def count_oracle(proposals):
    counts = Counter(proposals)
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def test_c1_vote_oracle():
    rng = np.random.default_rng(2024)
    vectors = [rng.integers(0, 4, size=rng.integers(1, 11)).tolist() for _ in range(10_000)]
    with criterion(1, "majority vote equals count-and-argmax oracle", 1):
        assert all(majority_vote(v)[0] == count_oracle(v) for v in vectors)


def test_c2_ensemble_transparency():
    grid = SyntheticGridSpec(3, 3, 0.1, seed=7)
    with criterion(2, "N=1 and N=5 identical copies match the bare controller", 10):
        for controller in ("fixed", "maxpressure"):
            base = dict(controller=controller, grid=grid, seed=7, duration=3600.0)
            bare = run(RunConfig(**base), bare=True).report
            assert bare.n_exited > 0
            for n in (1, 5):
                assert run(RunConfig(agents=n, **base)).report == bare


def test_c3_maxpressure_beats_fixed():
    scenario = str(ROOT / "scenarios" / "jinan-like.json")
    with criterion(3, "max pressure ATT at least 10% below fixed on a congested 3x4 grid", 60):
        for seed in range(5):
            fixed = run(RunConfig("fixed", scenario=scenario, seed=seed)).report
            mp = run(RunConfig("maxpressure", scenario=scenario, seed=seed)).report
            print(f"  seed {seed}: fixed ATT {fixed.att:.1f} AQL {fixed.aql:.1f} | "
                  f"max-pressure ATT {mp.att:.1f}")
            assert fixed.aql > 20
            assert mp.att <= 0.9 * fixed.att


def test_c4_mplight_learns():
    cfg = RunConfig("mplight", grid=SyntheticGridSpec(1, 1, 0.1, seed=0), seed=3,
                    mplight=MPLightSettings(episodes=50))
    with criterion(4, "MPLight reward improves and frozen policy is no worse than fixed", 300):
        res = train_mplight(cfg)
        rewards = [c["mean_reward"] for c in res.curve]
        first, last = statistics.fmean(rewards[:5]), statistics.fmean(rewards[-5:])
        print(f"  mean reward first 5 {first:.3f}, last 5 {last:.3f}")
        assert last >= first + 0.2 * abs(first)

        policy_cfg = RunConfig("mplight", grid=cfg.grid, seed=cfg.seed)
        controller = EnsembleController([MPLightPolicy(a) for a in res.agents])
        frozen, _, _ = execute(make_env(policy_cfg), controller)
        fixed = run(RunConfig("fixed", grid=cfg.grid, seed=cfg.seed)).report
        print(f"  frozen MPLight ATT {frozen.att:.1f}, fixed ATT {fixed.att:.1f}")
        assert frozen.att <= fixed.att


def test_c5_gradients():
    from test_mplight import numeric_grads

    rng = np.random.default_rng(5)
    with criterion(5, "analytic Q-network gradients match central differences", 10):
        for point in range(20):
            net = QNetwork(seed=point, dtype=np.float64)
            for p in net.params:
                p += rng.normal(scale=0.1, size=p.shape)
            s = rng.random((4, 12))
            a = rng.integers(0, 4, 4)
            y = rng.normal(size=4)
            _, grads = net.loss_and_grads(s, a, y)
            for g, n in zip(grads, numeric_grads(net, s, a, y)):
                rel = np.linalg.norm(g - n) / max(np.linalg.norm(g) + np.linalg.norm(n), 1e-12)
                assert rel < 1e-4


def test_c6_conservation_and_determinism(tmp_path):
    assert SCENARIOS, "no bundled scenarios"

    def check(env):
        entered, exited, on_net, backlog = env.conservation()
        assert entered == exited + on_net + backlog

    with criterion(6, "vehicles conserved every tick; repeated runs are byte-identical", 30):
        for path in SCENARIOS:
            cfg = RunConfig("llm", agents=3, scenario=str(path), seed=11,
                            llm=LLMSettings(backend="stochastic-mock"), out_dir=str(tmp_path / "out"),
                            vote_log=str(tmp_path / "out" / "votes.jsonl"))
            outputs = []
            for _ in range(2):
                env = make_env(cfg, record_events=True)
                run(cfg, on_tick=check, env=env)
                files = {p.name: p.read_bytes() for p in sorted((tmp_path / "out").iterdir())}
                outputs.append((files, repr(env.events).encode()))
                shutil.rmtree(tmp_path / "out")
            assert outputs[0] == outputs[1]
            assert set(outputs[0][0]) == {"result.json", "results.csv", "votes.jsonl"}


def test_c7_prompt_protocol():
    obs = ObservationState(0, Phase.ETWT, (1, 0, 2, 3, 5, 4, 0, 1),
                           ((0, 1, 2), (1, 0, 0), (0, 0, 1), (2, 2, 0),
                            (3, 1, 4), (0, 2, 1), (1, 1, 1), (0, 0, 3)))
    golden = (DATA / "golden_prompt.txt").read_text()
    with criterion(7, "golden prompt, tag parsing and fallback provenance", 1):
        assert build_prompt(obs) == golden
        for phase in Phase:
            assert parse_signal(f"reasoning...\n<signal>{phase.code}</signal>") is phase
        with pytest.raises(ParseError):
            parse_signal("ETWT is best here")
        backend = ScriptedBackend(["no answer"])
        assert decide_with_fallback(backend, obs, retries=2) == (Phase(
            int(np.argmax(obs.phase_pressures))), "fallback")
        assert backend.calls == 3
        ok = ScriptedBackend(["nope", "<signal>NLSL</signal>"])
        assert decide_with_fallback(ok, obs, retries=2) == (Phase.NLSL, "llm-retry-1")


def test_c8_voting_helps_noisy_agents():
    scenario = str(ROOT / "scenarios" / "small-2x2.json")
    llm = LLMSettings(backend="stochastic-mock", error_rate=0.2)
    with criterion(8, "N=10 voting beats N=1 with 20% noisy agents", 120):
        by_n = {}
        for n in (1, 10):
            by_n[n] = [run(RunConfig("llm", agents=n, scenario=scenario, seed=s, llm=llm))
                       for s in range(10)]
        att = {n: statistics.fmean(r.report.att for r in rs) for n, rs in by_n.items()}
        dis = {n: statistics.fmean(r.oracle_disagreement for r in rs) for n, rs in by_n.items()}
        print(f"  ATT N=1 {att[1]:.2f}, N=10 {att[10]:.2f}; "
              f"oracle disagreement N=1 {dis[1]:.4f}, N=10 {dis[10]:.4f}")
        assert att[10] <= att[1]
        assert dis[10] < dis[1]


def queue_total_at(events, boundary):
    return bisect_right(events["queue"], boundary) - bisect_left(events["discharge"], boundary)


def test_c9_metric_formulas():
    cfg = RunConfig("maxpressure", scenario=str(ROOT / "scenarios" / "small-2x2.json"), seed=2)
    with criterion(9, "ATT and AQL agree with raw trips and the event log", 10):
        env = make_env(cfg, record_events=True)
        report = run(cfg, env=env).report
        assert report.n_entered >= 500

        t_total = math.fsum(v.exit_time - v.entry_time for v in env.exited)
        assert len(env.exited) == report.n_exited
        assert math.isclose(report.att * report.n_exited, t_total, rel_tol=1e-9)
        assert math.isclose(report.t_total, t_total, rel_tol=1e-9)

        times = {"queue": [], "discharge": []}
        for ev in env.events:
            if ev[1] in times:
                times[ev[1]].append(ev[0])
        for v in times.values():
            v.sort()
        tau = env.config.tau_seconds
        n_steps = env.config.n_steps
        per_step = [queue_total_at(times, tau * (s + 1)) for s in range(n_steps)]
        assert math.isclose(statistics.fmean(per_step), report.aql, rel_tol=1e-9, abs_tol=1e-12)
