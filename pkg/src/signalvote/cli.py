"""Command line entry point: ``signalvote {run,gen-grid,compare,train}``."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

from .harness import (CONTROLLERS, LLMSettings, MPLightSettings, RunConfig, atomic_write, compare,
                      configs_from_plan, run, train_mplight)
from .metrics import report_csv
from .scenario import DEMAND_PROFILES, ScenarioError, SyntheticGridSpec, generate_grid, save_scenario
from .sim import SimError

logger = logging.getLogger("signalvote")


def parse_seeds(text: str) -> list[int]:
    """``"3"`` -> [3]; ``"0..9"`` -> [0, ..., 9]; ``"1,4,7"`` -> [1, 4, 7]."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--rows", type=int, default=3, help="synthetic grid rows (no --scenario)")
    p.add_argument("--cols", type=int, default=4, help="synthetic grid cols (no --scenario)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1,
                   help="arrival rate per entry road, veh/s")
    p.add_argument("--profile", choices=DEMAND_PROFILES, default="uniform")
    p.add_argument("--grid-seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--tau", type=float, default=30.0)
    p.add_argument("--agents", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=30, help="MPLight training episodes")
    p.add_argument("--weights-dir", help="load/save MPLight weights here")
    p.add_argument("--no-vote-training", action="store_true",
                   help="train MPLight agents in separate environments instead of voting")


def _config(args, controller: str, seed: int) -> RunConfig:
    grid = None
    if not args.scenario:
        grid = SyntheticGridSpec(args.rows, args.cols, args.lam, args.profile, args.grid_seed)
    llm = LLMSettings(
        backend=getattr(args, "llm_backend", "mock"),
        error_rate=getattr(args, "error_rate", 0.2),
        base_url=getattr(args, "llm_url", None),
        model=getattr(args, "llm_model", "default"),
        temperature=getattr(args, "temperature", 0.1),
        retries=getattr(args, "retries", 2),
        max_workers=getattr(args, "workers", 1),
    )
    mp = MPLightSettings(episodes=args.episodes, weights_dir=args.weights_dir,
                         vote_during_training=not args.no_vote_training)
    return RunConfig(controller=controller, agents=args.agents, seed=seed, duration=args.duration,
                     tau=args.tau, scenario=args.scenario, grid=grid, llm=llm, mplight=mp)


def cmd_run(args) -> int:
    seeds = parse_seeds(args.seeds) if args.seeds else [args.seed]
    out = Path(args.out) if args.out else None
    results = []
    for seed in seeds:
        cfg = _config(args, args.controller, seed)
        if out is not None:
            cfg.out_dir = str(out if len(seeds) == 1 else out / f"seed_{seed}")
        if args.vote_log:
            cfg.vote_log = args.vote_log if len(seeds) == 1 else f"{args.vote_log}.{seed}"
        results.append(run(cfg))
    rows = [r.csv_row() for r in results]
    if out is not None and len(seeds) > 1:
        atomic_write(out / "results.csv", report_csv(rows))
    print(report_csv(rows), end="")
    if len(seeds) > 1:
        for m in ("att", "aql", "awt"):
            vals = [row[m] for row in rows if row[m] is not None]
            if vals:
                sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
                print(f"{m.upper()}: {statistics.fmean(vals):.3f} ± {sd:.3f}")
    return 0


def cmd_gen_grid(args) -> int:
    spec = SyntheticGridSpec(args.rows, args.cols, args.lam, args.profile, args.seed,
                             turn_probability=args.turn_probability)
    sc = generate_grid(spec)
    if args.out:
        save_scenario(sc, args.out)
    else:
        sys.stdout.write(sc.dumps())
    return 0


def cmd_compare(args) -> int:
    plan = json.loads(Path(args.plan).read_text())
    configs = configs_from_plan(plan)
    cmp = compare(configs, workers=args.workers, out_dir=args.out or plan.get("out_dir"))
    print(cmp.markdown, end="")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, "mplight", args.seed)
    out = args.out or args.weights_dir
    res = train_mplight(cfg, out_dir=out)
    last = res.curve[-1]
    print(f"trained {len(res.agents)} agent(s) for {len(res.curve)} episodes; "
          f"final mean reward {last['mean_reward']:.3f}")
    for p in res.weight_paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signalvote",
                                     description="Traffic signal control with agent voting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one controller")
    _add_scenario_args(p)
    p.add_argument("--controller", choices=CONTROLLERS, default="fixed")
    p.add_argument("--seeds", help="seed range such as 0..9 (overrides --seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--vote-log", help="write one JSON vote record per line here")
    p.add_argument("--llm-backend", choices=("mock", "stochastic-mock", "http"), default="mock")
    p.add_argument("--llm-url", help="chat-completions base URL (or SIGNALVOTE_LLM_BASE_URL)")
    p.add_argument("--llm-model", default="default")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--error-rate", type=float, default=0.2, help="stochastic mock error rate")
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1, help="concurrent LLM agents")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-grid", help="write a synthetic grid scenario")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--profile", choices=DEMAND_PROFILES, default="uniform")
    p.add_argument("--turn-probability", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_grid)

    p = sub.add_parser("compare", help="run a plan and print a comparison table")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="train MPLight agents and save their weights")
    _add_scenario_args(p)
    p.add_argument("--out", help="directory for weights and training_curve.csv")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, SimError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
