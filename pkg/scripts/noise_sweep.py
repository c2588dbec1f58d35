#!/usr/bin/env python3
"""How much does voting buy as the agents get noisier?

For each per-call error rate of the stochastic mock and each ensemble size,
run the small 2x2 scenario over several seeds and report mean ATT and the
share of executed actions that differ from max pressure.
"""

import argparse
import statistics
from pathlib import Path

from signalvote.cli import parse_seeds
from signalvote.harness import LLMSettings, RunConfig, run

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description="ensemble size vs agent noise")
    parser.add_argument("--scenario", default=str(ROOT / "scenarios" / "small-2x2.json"))
    parser.add_argument("--error-rates", default="0.1,0.2,0.4,0.6")
    parser.add_argument("--agents", default="1,3,5,10")
    parser.add_argument("--seeds", default="0..4")
    args = parser.parse_args()

    seeds = parse_seeds(args.seeds)
    print("error_rate,agents,att,disagreement")
    for rate in (float(x) for x in args.error_rates.split(",")):
        for n in (int(x) for x in args.agents.split(",")):
            llm = LLMSettings(backend="stochastic-mock", error_rate=rate)
            rs = [run(RunConfig("llm", agents=n, scenario=args.scenario, seed=s, llm=llm))
                  for s in seeds]
            att = statistics.fmean(r.report.att for r in rs)
            dis = statistics.fmean(r.oracle_disagreement for r in rs)
            print(f"{rate:.2f},{n},{att:.3f},{dis:.4f}")


if __name__ == "__main__":
    main()
