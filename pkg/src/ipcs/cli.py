"""Command line entry points: gen-data, train-baseline, bench, serve.

Every subcommand also accepts --config pointing at a JSON file whose keys
mirror the long flag names (dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import evaluate, optim, refine, scene, segnet, simulate


def _load_config_file(path) -> dict:
    with open(path) as f:
        raw = json.load(f)
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """File values fill in wherever the flag was left at its default."""
    if not getattr(args, "config", None):
        return args
    overrides = _load_config_file(args.config)
    explicit = {a.replace("-", "_").lstrip("_") for a in sys.argv
                if a.startswith("--")}
    for key, value in overrides.items():
        if hasattr(args, key) and key.replace("_", "-") not in \
                {e.replace("_", "-") for e in explicit}:
            setattr(args, key, value)
    return args


def cmd_gen_data(args):
    shift = scene.DomainShift(color_jitter=args.color_jitter,
                              scale_range=(args.scale_lo, args.scale_hi),
                              dropout=args.dropout)
    spec = scene.SceneSpec(points_per_m2=args.density, seed=args.seed,
                           variation=args.variation, shift=shift)
    manifest = scene.make_benchmark(args.train, args.test, spec, args.out,
                                    grid_cell=args.grid_cell,
                                    max_points=args.max_points)
    sizes = [e["num_points"] for e in manifest["test"]]
    print(f"wrote {len(manifest['train'])} train + {len(manifest['test'])} test "
          f"scenes to {args.out} (test sizes {min(sizes)}..{max(sizes)})")


def cmd_train_baseline(args):
    manifest = scene.load_manifest(os.path.join(args.data, "manifest.json"))
    train = scene.manifest_clouds(manifest, args.data, "train")
    cfg = segnet.SegNetConfig(seed=args.seed)
    opt = optim.OptimizerConfig(kind=args.optimizer, learning_rate=args.lr,
                                momentum=0.9, weight_decay=args.weight_decay)
    params, losses = segnet.train_supervised(
        train, cfg, opt, args.epochs,
        log=print if args.verbose else None)
    segnet.save_params(params, args.out)
    test = scene.manifest_clouds(manifest, args.data, "test")
    vals = []
    for cloud in test:
        st = segnet.forward(cloud, params)
        vals.append(evaluate.miou(st.labels, cloud.labels, cfg.num_classes)[0])
    print(f"checkpoint {args.out}; final loss {losses[-1]:.4f}; "
          f"test mIoU {sum(vals) / len(vals):.4f}")


def cmd_bench(args):
    manifest = scene.load_manifest(os.path.join(args.data, "manifest.json"))
    eval_cfg = evaluate.EvalConfig(
        target_mious=tuple(float(t) for t in args.targets.split(",")),
        click_budget=args.budget,
        variants=tuple(args.variants.split(",")),
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        sim=simulate.SimConfig(clicks_per_round=args.clicks_per_round),
    )
    summary = evaluate.run_benchmark(
        manifest, args.data, args.checkpoint, eval_cfg, args.out,
        workers=args.workers, log=print if args.verbose else None)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"artifacts under {args.out}")


def cmd_serve(args):
    from . import service as service_mod
    config = None
    if args.regime == "adam":
        config = refine.RefineConfig.adam_regime()
    server = service_mod.serve(args.checkpoint, args.data, host=args.host,
                               port=args.port, default_config=config)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port} "
          f"(scenes: {len(server.service.scenes)})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipcs",
        description="Interactive point cloud segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=40)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--density", type=float, default=210.0,
                   help="surface sampling density, points per square meter")
    g.add_argument("--color-jitter", type=float, default=0.14)
    g.add_argument("--scale-lo", type=float, default=0.99)
    g.add_argument("--scale-hi", type=float, default=1.01)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--variation", type=float, default=0.2,
                   help="per-scene room/object variation")
    g.add_argument("--grid-cell", type=float, default=0.03)
    g.add_argument("--max-points", type=int, default=150000)
    g.add_argument("--config", help="JSON file with defaults for these flags")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-baseline", help="pre-train the network")
    t.add_argument("--data", required=True, help="gen-data output directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=12)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train_baseline)

    b = sub.add_parser("bench", help="run the click-refinement benchmark")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--targets", default="0.80,0.85,0.90")
    b.add_argument("--budget", type=int, default=30)
    b.add_argument("--variants", default="full",
                   help="comma list: full,no_stabilization,no_filtering,"
                        "no_warmup,keep_ga,ia,full_adam")
    b.add_argument("--seeds", default="0")
    b.add_argument("--clicks-per-round", type=int, default=1)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--verbose", action="store_true")
    b.add_argument("--config")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="serve sessions over HTTP for the web UI")
    s.add_argument("--checkpoint", default=os.environ.get("IPCS_CHECKPOINT"),
                   required="IPCS_CHECKPOINT" not in os.environ)
    s.add_argument("--data", default=os.environ.get("IPCS_DATA"),
                   help="gen-data directory with scenes to offer")
    s.add_argument("--host", default=os.environ.get("IPCS_HOST", "127.0.0.1"))
    s.add_argument("--port", type=int,
                   default=int(os.environ.get("IPCS_PORT", "8008")))
    s.add_argument("--regime", choices=("sgd", "adam"), default="sgd")
    s.add_argument("--config")
    s.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _merge_config(args, parser)
    args.func(args)


if __name__ == "__main__":
    main()
