"""Reproduce the headline results table end to end.

Generates the default benchmark, trains the baseline, and sweeps all
refinement variants. Artifacts land under the given run directory.
"""

import argparse
import json
import os
import subprocess
import sys

HERE = os.path.dirname(os.path.abspath(__file__))


def sh(args):
    print("+", " ".join(args), flush=True)
    env = dict(os.environ, PYTHONPATH=os.path.join(HERE, "..", "src"))
    subprocess.run([sys.executable, "-m", "ipcs.cli", *args], check=True, env=env)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--train", type=int, default=40)
    ap.add_argument("--test", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--budget", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=2)
    args = ap.parse_args()

    data = os.path.join(args.out, "data")
    ckpt = os.path.join(args.out, "net.ckpt")
    bench = os.path.join(args.out, "bench")
    sh(["gen-data", "--out", data, "--train", str(args.train),
        "--test", str(args.test), "--seed", str(args.seed)])
    sh(["train-baseline", "--data", data, "--out", ckpt,
        "--epochs", str(args.epochs), "--seed", str(args.seed)])
    sh(["bench", "--data", data, "--checkpoint", ckpt, "--out", bench,
        "--budget", str(args.budget), "--targets", "0.80,0.85,0.90",
        "--variants", "full,no_stabilization,no_filtering,no_warmup,keep_ga,ia",
        "--workers", str(args.workers), "--verbose"])
    with open(os.path.join(bench, "summary.json")) as f:
        summary = json.load(f)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
