"""Compare refinement variants on a pilot benchmark (assumes /tmp/e2 exists)."""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ipcs import evaluate, scene, segnet, simulate


def main():
    base = sys.argv[1] if len(sys.argv) > 1 else "/tmp/e2"
    budget = int(sys.argv[2]) if len(sys.argv) > 2 else 15
    man = scene.load_manifest(os.path.join(base, "manifest.json"))
    test = scene.manifest_clouds(man, base, "test")
    params = segnet.load_params(os.path.join(base, "ckpt.bin"))
    sim = simulate.SimConfig()
    for variant in ["full", "no_filtering", "no_warmup", "no_stabilization", "ia", "keep_ga"]:
        cfg = evaluate.variant_config(variant)
        finals, inits, bases = [], [], []
        t0 = time.time()
        for c in test:
            rec = evaluate.noc_protocol(c, params, cfg, sim, targets=(0.95,),
                                        budget=budget, variant=variant)
            finals.append(rec.final_miou)
            inits.append(rec.initial_miou)
            bases.append(rec.baseline_miou)
        print(f"{variant:18s} base={np.mean(bases):.3f} init={np.mean(inits):.3f} "
              f"final={np.mean(finals):.3f} (each: {[round(v,3) for v in finals]}) "
              f"{time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
