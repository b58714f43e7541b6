"""Quick pilot: train a small baseline, measure shift-induced degradation,
and watch the refinement loop move mIoU. Used to pick benchmark defaults."""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ipcs import evaluate, optim, refine, scene, segnet, simulate
from ipcs.tensor import BNMode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", type=int, default=10)
    ap.add_argument("--test", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--budget", type=int, default=15)
    ap.add_argument("--jitter", type=float, default=0.15)
    ap.add_argument("--dropout", type=float, default=0.1)
    ap.add_argument("--scale", type=float, default=0.1)
    ap.add_argument("--density", type=float, default=230.0)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="full")
    ap.add_argument("--out", default="/tmp/pilot")
    args = ap.parse_args()

    spec = scene.SceneSpec(
        seed=args.seed,
        points_per_m2=args.density,
        shift=scene.DomainShift(color_jitter=args.jitter,
                                scale_range=(1 - args.scale, 1 + args.scale),
                                dropout=args.dropout),
    )
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    manifest = scene.make_benchmark(args.train, args.test, spec, args.out)
    train = scene.manifest_clouds(manifest, args.out, "train")
    test = scene.manifest_clouds(manifest, args.out, "test")
    print(f"data: {time.time()-t0:.1f}s; sizes train={[c.num_points for c in train]}")

    cfg = segnet.SegNetConfig(seed=args.seed)
    opt = optim.OptimizerConfig(kind="sgd", learning_rate=args.lr, momentum=0.9,
                                weight_decay=1e-4)
    t0 = time.time()
    params, losses = segnet.train_supervised(train, cfg, opt, args.epochs,
                                             log=lambda s: None)
    print(f"train: {time.time()-t0:.1f}s; loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    def eval_miou(clouds, mode):
        vals = []
        for c in clouds:
            st = segnet.forward(c, params, bn_mode=mode)
            vals.append(evaluate.miou(st.labels, c.labels, cfg.num_classes)[0])
        return vals

    tr = eval_miou(train[:4], BNMode.RUNNING)
    te_run = eval_miou(test, BNMode.RUNNING)
    te_inst = eval_miou(test, BNMode.INSTANCE)
    print(f"train mIoU (running): {np.mean(tr):.3f} {[round(v,3) for v in tr]}")
    print(f"test  mIoU (running): {np.mean(te_run):.3f} {[round(v,3) for v in te_run]}")
    print(f"test  mIoU (instance): {np.mean(te_inst):.3f}")

    rc = evaluate.variant_config(args.variant)
    sim = simulate.SimConfig()
    for c in test[:3]:
        t0 = time.time()
        rec = evaluate.noc_protocol(c, params, rc, sim, targets=(0.9,),
                                    budget=args.budget, variant=args.variant)
        curve = [round(v, 3) for v in rec.miou_curve]
        print(f"{c.name}: base={rec.baseline_miou:.3f} curve={curve} "
              f"({time.time()-t0:.1f}s)")


if __name__ == "__main__":
    main()
