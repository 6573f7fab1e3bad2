#!/usr/bin/env python3
"""Train the default configuration over several seeds and summarize learning.

Writes one JSON line per seed (final accuracy, mean verifier score, reward
trajectory endpoints) and a closing summary line.

Usage: python scripts/run_seed_sweep.py [--seeds 11 12 13 14 15] [--epochs 150] [--out sweep.jsonl]
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ltrk.dapo import TrainConfig, evaluate_cases, train
from ltrk.synth import case_stream_rng, generate_case, generate_world


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[11, 12, 13, 14, 15])
    parser.add_argument("--epochs", type=int, default=150)
    parser.add_argument("--world-seed", type=int, default=7)
    parser.add_argument("--eval-cases", type=int, default=100)
    parser.add_argument("--out", default=None, help="JSONL output file (default stdout only)")
    args = parser.parse_args()

    world = generate_world(seed=args.world_seed)
    eval_cases = [
        generate_case(world, case_stream_rng(777, i)) for i in range(args.eval_cases)
    ]

    rows = []
    for seed in args.seeds:
        config = TrainConfig(rng_seed=seed, epochs=args.epochs)
        start = time.monotonic()
        result = train(config, world)
        outcome = evaluate_cases(result.policy, world, eval_cases,
                                 steps=config.steps_per_rollout)
        row = {
            "seed": seed,
            "eval_accuracy": outcome.accuracy,
            "eval_f_logic": outcome.mean_f_logic,
            "eval_rouge_f1": outcome.mean_rouge_f1,
            "first_epoch_reward": result.records[0].mean_reward,
            "final_epoch_reward": result.records[-1].mean_reward,
            "seconds": round(time.monotonic() - start, 1),
        }
        rows.append(row)
        print(json.dumps(row, sort_keys=True))

    summary = {
        "summary": True,
        "mean_accuracy": float(np.mean([r["eval_accuracy"] for r in rows])),
        "mean_f_logic": float(np.mean([r["eval_f_logic"] for r in rows])),
        "reward_std": float(np.std([r["final_epoch_reward"] for r in rows])),
    }
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows + [summary]:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
