#!/usr/bin/env python3
"""Run every controller on the two bundled city-like grids and print a comparison table.

    python3 scripts/reproduce_table.py --seeds 0..2 --out runs/table

MPLight is trained per (agents, seed) before its frozen evaluation, so the
default 30 episodes dominate the runtime; lower --episodes for a quick look.
"""

import argparse
import logging
from pathlib import Path

from signalvote.cli import parse_seeds
from signalvote.harness import AGENT_PRESETS, compare, configs_from_plan

ROOT = Path(__file__).resolve().parent.parent


def build_plan(seeds, episodes, llm_backend, error_rate, duration):
    methods = [{"controller": "fixed"}, {"controller": "maxpressure"}]
    methods += [{"controller": c, "agents": n} for c in ("mplight", "llm") for n in AGENT_PRESETS]
    return {
        "scenarios": [{"name": "jinan-like", "path": str(ROOT / "scenarios" / "jinan-like.json")},
                      {"name": "hangzhou-like", "path": str(ROOT / "scenarios" / "hangzhou-like.json")}],
        "methods": methods,
        "seeds": seeds,
        "duration": duration,
        "llm": {"backend": llm_backend, "error_rate": error_rate},
        "mplight": {"episodes": episodes},
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0..2")
    parser.add_argument("--episodes", type=int, default=30)
    parser.add_argument("--duration", type=float, default=3600.0)
    parser.add_argument("--llm-backend", default="stochastic-mock",
                        choices=("mock", "stochastic-mock", "http"))
    parser.add_argument("--error-rate", type=float, default=0.2)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="runs/table")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    plan = build_plan(parse_seeds(args.seeds), args.episodes, args.llm_backend, args.error_rate,
                      args.duration)
    result = compare(configs_from_plan(plan), workers=args.workers, out_dir=args.out)
    print(result.markdown, end="")


if __name__ == "__main__":
    main()
