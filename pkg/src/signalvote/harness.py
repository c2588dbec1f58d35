"""Experiment harness: build a scenario and controllers, run decision steps, report metrics."""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .ensemble import BareController, EnsembleController, majority_vote
from .llm import ChatCompletionsBackend, LLMAgent, MockBackend, StochasticMockBackend
from .metrics import MetricsAccumulator, MetricsReport, report_csv
from .mplight import MPLightAgent, MPLightConfig, MPLightPolicy, Transition, encode_state
from .policies import FixedTimePolicy, MaxPressurePolicy, maxpressure_decide
from .scenario import LoadedScenario, ScenarioError, SyntheticGridSpec, build, generate_grid, load_scenario
from .sim import ContractError, SimConfig, TrafficEnv

logger = logging.getLogger(__name__)

CONTROLLERS = ("fixed", "maxpressure", "mplight", "llm")
METHOD_LABELS = {"fixed": "Fixed", "maxpressure": "Max pressure", "mplight": "MPLight", "llm": "LLM"}
AGENT_PRESETS = (1, 5, 10)


@dataclass
class LLMSettings:
    backend: str = "mock"  # mock | stochastic-mock | http
    error_rate: float = 0.2
    base_url: str | None = None
    model: str = "default"
    temperature: float = 0.1
    max_tokens: int = 1024
    timeout: float = 60.0
    retries: int = 2
    max_workers: int = 1


@dataclass
class MPLightSettings:
    episodes: int = 30
    weights_dir: str | None = None
    vote_during_training: bool = True
    epsilon_decay_fraction: float = 0.2
    agent: MPLightConfig = field(default_factory=MPLightConfig)


@dataclass
class RunConfig:
    controller: str = "fixed"
    agents: int = 1
    seed: int = 0
    duration: float = 3600.0
    tau: float = 30.0
    tick: float = 1.0
    scenario: str | None = None
    grid: SyntheticGridSpec | None = None
    name: str | None = None
    llm: LLMSettings = field(default_factory=LLMSettings)
    mplight: MPLightSettings = field(default_factory=MPLightSettings)
    out_dir: str | None = None
    vote_log: str | None = None

    def validate(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ContractError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if self.agents < 1:
            raise ContractError("agents must be >= 1")
        if self.scenario is None and self.grid is None:
            raise ContractError("either scenario or grid must be given")
        if self.llm.backend not in ("mock", "stochastic-mock", "http"):
            raise ContractError(f"unknown LLM backend {self.llm.backend!r}")
        self.sim_config({}).validate()

    def sim_config(self, overrides: dict) -> SimConfig:
        return SimConfig(tick_seconds=self.tick, tau_seconds=self.tau,
                         duration_seconds=self.duration, seed=self.seed,
                         **{k: float(v) for k, v in overrides.items()})

    @property
    def scenario_label(self) -> str:
        if self.name:
            return self.name
        if self.scenario:
            return Path(self.scenario).stem
        return f"grid{self.grid.rows}x{self.grid.cols}"

    @property
    def method_label(self) -> str:
        n = self.agents
        return f"{METHOD_LABELS[self.controller]} ({n} agent{'s' if n > 1 else ''})"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if d.get("grid") is not None:
            d["grid"] = SyntheticGridSpec(**d["grid"])
        if "llm" in d:
            d["llm"] = LLMSettings(**d["llm"])
        if "mplight" in d:
            m = dict(d["mplight"])
            if "agent" in m:
                m["agent"] = MPLightConfig(**m["agent"])
            d["mplight"] = MPLightSettings(**m)
        return cls(**d)


@dataclass
class RunResult:
    report: MetricsReport
    config: dict
    n_steps: int
    unanimity_rate: float | None
    fallback_rate: float | None  # share of LLM decisions that were not a first-try answer
    oracle_disagreement: float  # share of executed actions differing from max-pressure
    wall_clock: float = 0.0

    def summary(self) -> dict:
        """Everything except wall-clock time, so equal configs give equal files."""
        return {
            "method": METHOD_LABELS[self.config["controller"]],
            "agents": self.config["agents"],
            "seed": self.config["seed"],
            "metrics": self.report.to_dict(),
            "n_steps": self.n_steps,
            "unanimity_rate": self.unanimity_rate,
            "fallback_rate": self.fallback_rate,
            "oracle_disagreement": self.oracle_disagreement,
            "config": self.config,
        }

    def csv_row(self) -> dict:
        r = self.report
        return {"method": METHOD_LABELS[self.config["controller"]], "agents": self.config["agents"],
                "seed": self.config["seed"], "att": r.att, "aql": r.aql, "awt": r.awt,
                "n_entered": r.n_entered, "n_exited": r.n_exited}


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def agent_seeds(seed: int, n: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n)]


def load(config: RunConfig) -> LoadedScenario:
    if config.scenario is not None:
        return load_scenario(config.scenario)
    return build(generate_grid(config.grid))


def make_env(config: RunConfig, scenario: LoadedScenario | None = None, seed: int | None = None,
             record_events: bool = False) -> TrafficEnv:
    scenario = scenario or load(config)
    sim = config.sim_config(scenario.overrides)
    if seed is not None:
        sim = replace(sim, seed=seed)
    return TrafficEnv(scenario.network, sim, scenario.demand, record_events=record_events)


def make_policies(config: RunConfig, mplight_agents: Sequence[MPLightAgent] | None = None) -> list:
    n, seeds = config.agents, agent_seeds(config.seed, config.agents)
    if config.controller == "fixed":
        return [FixedTimePolicy() for _ in range(n)]
    if config.controller == "maxpressure":
        return [MaxPressurePolicy() for _ in range(n)]
    if config.controller == "mplight":
        if mplight_agents is None:
            raise ContractError("mplight policies need trained agents")
        return [MPLightPolicy(a, explore=False) for a in mplight_agents]
    s = config.llm
    if s.backend == "http":
        shared = ChatCompletionsBackend(s.base_url, s.model, timeout=s.timeout)
        backends = [shared] * n
    elif s.backend == "stochastic-mock":
        backends = [StochasticMockBackend(s.error_rate, seed) for seed in seeds]
    else:
        backends = [MockBackend() for _ in range(n)]
    return [LLMAgent(b, s.retries, s.temperature, s.model, s.max_tokens, s.timeout) for b in backends]


def execute(env: TrafficEnv, controller, on_tick=None) -> tuple[MetricsReport, int, int]:
    """Reset ``env`` and run it to its duration under ``controller``.

    Returns the report, the decision-step count and how many executed
    actions differed from the max-pressure choice on the same observation.
    """
    obs = env.reset()
    controller.reset()
    acc = MetricsAccumulator(env.network.K)
    steps = disagree = 0
    while not env.done:
        actions, _ = controller.decide_all(obs)
        disagree += sum(a != maxpressure_decide(o.phase_pressures) for a, o in zip(actions, obs))
        obs = env.step(actions, on_tick=on_tick)
        acc.record_step(env.queue_lengths(), env.step_waits())
        for v in env.pop_exited():
            acc.record_exit(v)
        steps += 1
    return acc.finalize(env.n_entered), steps, disagree


def run(config: RunConfig, bare: bool = False, on_tick=None, env: TrafficEnv | None = None
        ) -> RunResult:
    """Run one configuration end to end and write its outputs if ``out_dir`` is set."""
    config.validate()
    if bare and config.agents != 1:
        raise ContractError("a bare run uses exactly one agent")
    logger.info("effective config: %s", json.dumps(config.to_dict(), sort_keys=True))
    t0 = time.perf_counter()
    env = env or make_env(config)

    agents = None
    if config.controller == "mplight":
        agents = obtain_mplight_agents(config)
    policies = make_policies(config, agents)
    controller = BareController(policies[0]) if bare else EnsembleController(
        policies, max_workers=config.llm.max_workers if config.controller == "llm" else 1)

    vote_fh = None
    if config.vote_log and not bare:
        Path(config.vote_log).parent.mkdir(parents=True, exist_ok=True)
        vote_fh = open(config.vote_log, "w")
        controller.stream_to(vote_fh)
    try:
        report, steps, disagree = execute(env, controller, on_tick)
    finally:
        if vote_fh is not None:
            vote_fh.close()

    fallback_rate = None
    if config.controller == "llm":
        prov = [p for a in policies for p in a.provenance]
        fallback_rate = sum(p != "llm" for p in prov) / len(prov) if prov else 0.0
    result = RunResult(
        report=report,
        config=config.to_dict(),
        n_steps=steps,
        unanimity_rate=None if bare else controller.unanimity_rate(),
        fallback_rate=fallback_rate,
        oracle_disagreement=disagree / max(steps * env.network.K, 1),
        wall_clock=time.perf_counter() - t0,
    )
    logger.info("%s on %s seed %d: att=%s aql=%.3f awt=%s (%.1fs)", config.method_label,
                config.scenario_label, config.seed, report.att, report.aql, report.awt,
                result.wall_clock)
    if config.out_dir:
        write_result(result, config.out_dir)
    return result


def write_result(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    atomic_write(out / "result.json", json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    atomic_write(out / "results.csv", report_csv([result.csv_row()]))


# -- MPLight training ------------------------------------------------------

@dataclass
class TrainResult:
    agents: list[MPLightAgent]
    curve: list[dict]
    weight_paths: list[Path]


def _mplight_agents(config: RunConfig) -> list[MPLightAgent]:
    return [MPLightAgent(config.mplight.agent, seed=s) for s in agent_seeds(config.seed, config.agents)]


def obtain_mplight_agents(config: RunConfig) -> list[MPLightAgent]:
    wd = config.mplight.weights_dir
    if wd and all((Path(wd) / f"agent_{i}.bin").exists() for i in range(config.agents)):
        agents = _mplight_agents(config)
        for i, a in enumerate(agents):
            a.load_weights(Path(wd) / f"agent_{i}.bin")
        return agents
    return train_mplight(config).agents


def _train_episode(env: TrafficEnv, agents: list[MPLightAgent], vote: bool) -> tuple[float, float]:
    """One exploring episode; all agents learn from the executed transitions."""
    obs = env.reset()
    K = env.network.K
    cap = agents[0].config.capacity_norm
    rewards, losses = [], []
    while not env.done:
        states = [encode_state(o, cap) for o in obs]
        proposals = [[a.act(s, explore=True) for s in states] for a in agents]
        if vote:
            actions = [majority_vote([p[k] for p in proposals])[0] for k in range(K)]
        else:
            actions = proposals[0]
        obs = env.step(actions)
        next_states = [encode_state(o, cap) for o in obs]
        r = [-float(env.intersection_pressure(k)) for k in range(K)]
        rewards.extend(r)
        for a in agents:
            for k in range(K):
                a.store(Transition(states[k], int(actions[k]), r[k], next_states[k]))
            loss = a.train_step()
            if loss is not None:
                losses.append(loss)
            a.act_steps += 1
            a.update_epsilon()
    return float(np.mean(rewards)), (float(np.mean(losses)) if losses else math.nan)


def train_mplight(config: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Train ``config.agents`` independently seeded agents for ``episodes`` episodes.

    With ``vote_during_training`` the agents share one environment and the
    voted action is executed; otherwise each agent explores its own copy.
    Episode ``e`` uses arrival seed ``seed + 1 + e``, keeping the evaluation
    seed unseen.
    """
    config.validate()
    s = config.mplight
    if s.episodes < 1:
        raise ContractError("nothing to train: episodes must be >= 1")
    scenario = load(config)
    steps_per_episode = config.sim_config(scenario.overrides).n_steps
    agent_cfg = replace(s.agent, epsilon_decay_steps=max(
        1, int(s.epsilon_decay_fraction * s.episodes * steps_per_episode)))
    agents = [MPLightAgent(agent_cfg, seed=sd) for sd in agent_seeds(config.seed, config.agents)]
    vote = s.vote_during_training or config.agents == 1
    curve = []
    for ep in range(s.episodes):
        seed = config.seed + 1 + ep
        if vote:
            env = make_env(config, scenario, seed=seed)
            reward, loss = _train_episode(env, agents, vote=True)
        else:
            results = [_train_episode(make_env(config, scenario, seed=seed), [a], vote=False)
                       for a in agents]
            reward = float(np.mean([r for r, _ in results]))
            loss = float(np.nanmean([l for _, l in results])) if any(
                not math.isnan(l) for _, l in results) else math.nan
        curve.append({"episode": ep, "mean_reward": reward, "mean_loss": loss,
                      "epsilon": agents[0].epsilon})
        logger.info("episode %d: reward %.3f loss %.4f eps %.3f", ep, reward, loss, agents[0].epsilon)

    paths = []
    out = Path(out_dir) if out_dir else (Path(s.weights_dir) if s.weights_dir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for i, a in enumerate(agents):
            p = out / f"agent_{i}.bin"
            a.save_weights(p)
            paths.append(p)
        lines = ["episode,mean_reward,mean_loss,epsilon"]
        lines += [f"{c['episode']},{c['mean_reward']:.6f},{c['mean_loss']:.6f},{c['epsilon']:.6f}"
                  for c in curve]
        atomic_write(out / "training_curve.csv", "\n".join(lines) + "\n")
    return TrainResult(agents, curve, paths)


# -- comparison tables -----------------------------------------------------

@dataclass
class Comparison:
    results: list[RunResult]
    csv: str
    markdown: str


def _run_quiet(config: RunConfig) -> RunResult:
    return run(config)


def compare(configs: Sequence[RunConfig], workers: int = 1, out_dir: str | Path | None = None
            ) -> Comparison:
    """Run every config and tabulate ATT/AQL/AWT per (method, agents) and scenario."""
    if len(configs) < 2:
        raise ContractError("compare needs at least two configs")
    by_scenario: dict[str, set] = {}
    for c in configs:
        c.validate()
        by_scenario.setdefault(c.scenario_label, set()).add((c.controller, c.agents))
    method_sets = list(by_scenario.values())
    if any(m != method_sets[0] for m in method_sets):
        raise ContractError("every scenario must be run with the same set of methods")
    if len(method_sets[0]) < 2 and len(by_scenario) < 2:
        raise ContractError("compare needs at least two methods on a shared scenario")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_quiet, configs))
    else:
        results = [run(c) for c in configs]

    csv_text = report_csv([r.csv_row() for r in results])
    md = markdown_table(configs, results)
    if out_dir:
        atomic_write(Path(out_dir) / "comparison.csv", csv_text)
        atomic_write(Path(out_dir) / "comparison.md", md)
    return Comparison(results, csv_text, md)


def _mean_std(vals: list[float]) -> tuple[float | None, float | None]:
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else None)


def markdown_table(configs: Sequence[RunConfig], results: Sequence[RunResult]) -> str:
    scenarios = list(dict.fromkeys(c.scenario_label for c in configs))
    methods = list(dict.fromkeys((c.controller, c.agents) for c in configs))
    methods.sort(key=lambda m: (CONTROLLERS.index(m[0]), m[1]))
    cells: dict[tuple, tuple] = {}
    for sc in scenarios:
        for m in methods:
            rs = [r for c, r in zip(configs, results)
                  if c.scenario_label == sc and (c.controller, c.agents) == m]
            for metric in ("att", "aql", "awt"):
                cells[(sc, m, metric)] = _mean_std([getattr(r.report, metric) for r in rs])
    best = {}
    for sc in scenarios:
        for metric in ("att", "aql", "awt"):
            vals = [cells[(sc, m, metric)][0] for m in methods if cells[(sc, m, metric)][0] is not None]
            best[(sc, metric)] = min(vals) if vals else None

    head = "| Method | " + " | ".join(f"{sc} {x}" for sc in scenarios for x in ("ATT", "AQL", "AWT")) + " |"
    sep = "|---|" + "---:|" * (3 * len(scenarios))
    lines = [head, sep]
    for m in methods:
        label = f"{METHOD_LABELS[m[0]]} ({m[1]} agent{'s' if m[1] > 1 else ''})"
        row = [label]
        for sc in scenarios:
            for metric in ("att", "aql", "awt"):
                mean, std = cells[(sc, m, metric)]
                if mean is None:
                    row.append("NA")
                    continue
                txt = f"{mean:.3f}" + (f" ± {std:.3f}" if std is not None else "")
                row.append(f"**{txt}**" if mean == best[(sc, metric)] else txt)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def configs_from_plan(plan: dict) -> list[RunConfig]:
    """Expand a plan: every scenario x method x seed becomes one RunConfig.

    ``{"scenarios": [{"name": "jinan", "path": "..."} | {"name": ..., "grid": {...}}],
       "methods": [{"controller": "fixed", "agents": 1}, ...],
       "seeds": [0, 1], "duration": 3600, "tau": 30, "llm": {...}, "mplight": {...}}``
    """
    unknown = set(plan) - {"scenarios", "methods", "seeds", "duration", "tau", "tick", "llm",
                           "mplight", "out_dir"}
    if unknown:
        raise ScenarioError(f"unknown plan keys: {sorted(unknown)}")
    common: dict[str, Any] = {k: plan[k] for k in ("duration", "tau", "tick") if k in plan}
    llm = LLMSettings(**plan.get("llm", {}))
    mp = dict(plan.get("mplight", {}))
    if "agent" in mp:
        mp["agent"] = MPLightConfig(**mp["agent"])
    configs = []
    for sc in plan["scenarios"]:
        where = {"scenario": sc["path"]} if "path" in sc else {"grid": SyntheticGridSpec(**sc["grid"])}
        for m in plan["methods"]:
            for seed in plan.get("seeds", [0]):
                configs.append(RunConfig(controller=m["controller"], agents=m.get("agents", 1),
                                         seed=seed, name=sc.get("name"), llm=llm,
                                         mplight=MPLightSettings(**mp), **where, **common))
    return configs
