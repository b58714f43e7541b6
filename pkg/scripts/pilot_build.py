"""Build a pilot benchmark + baseline checkpoint in one go."""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ipcs import evaluate, optim, scene, segnet
from ipcs.tensor import BNMode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--train", type=int, default=8)
    ap.add_argument("--test", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jitter", type=float, default=None)
    args = ap.parse_args()

    shift = scene.DomainShift() if args.jitter is None else \
        scene.DomainShift(color_jitter=args.jitter)
    spec = scene.SceneSpec(seed=args.seed, shift=shift)
    t0 = time.time()
    man = scene.make_benchmark(args.train, args.test, spec, args.out)
    train = scene.manifest_clouds(man, args.out, "train")
    test = scene.manifest_clouds(man, args.out, "test")
    print(f"data {time.time()-t0:.0f}s sizes={[c.num_points for c in test]}", flush=True)

    cfg = segnet.SegNetConfig(seed=args.seed)
    opt = optim.OptimizerConfig(kind="sgd", learning_rate=0.05, momentum=0.9,
                                weight_decay=5e-4)
    t0 = time.time()
    params, losses = segnet.train_supervised(train, cfg, opt, args.epochs)
    print(f"train {time.time()-t0:.0f}s loss {losses[0]:.3f} -> {losses[-1]:.3f}",
          flush=True)
    segnet.save_params(params, os.path.join(args.out, "ckpt.bin"))

    mi = lambda c, mode: evaluate.miou(
        segnet.forward(c, params, bn_mode=mode).labels, c.labels, 8)[0]
    run = [mi(c, BNMode.RUNNING) for c in test]
    inst = [mi(c, BNMode.INSTANCE) for c in test]
    print("test running :", [round(v, 3) for v in run], "mean",
          round(float(np.mean(run)), 3))
    print("test instance:", [round(v, 3) for v in inst], "mean",
          round(float(np.mean(inst)), 3))


if __name__ == "__main__":
    main()
