"""Benchmark harness: mIoU, the number-of-clicks protocol, variant sweeps.

A run drives one session per (scene, variant, seed): warm up, then feed
simulator clicks until every target mIoU is reached or the click budget is
spent. Results land in a CSV (one row per click), a JSON summary and an SVG
of the mean mIoU-vs-clicks curves.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import refine as refine_mod
from . import segnet, simulate
from .refine import RefineConfig
from .scene import LabeledCloud, load_ply
from .simulate import SimConfig
from .tensor import BNMode, DimensionError

FAILURE = "FAILURE"


class UndefinedMetricError(Exception):
    pass


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int
         ) -> Tuple[float, np.ndarray]:
    """Mean IoU over classes present in prediction or ground truth.

    Classes absent from both sides are excluded (returned as NaN).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if len(pred) != len(gt):
        raise DimensionError("prediction and ground truth lengths disagree")
    per_class = np.full(num_classes, np.nan)
    any_defined = False
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = int(np.sum(p | g))
        if union == 0:
            continue
        per_class[c] = float(np.sum(p & g)) / union
        any_defined = True
    if not any_defined:
        raise UndefinedMetricError("no class present in either labeling")
    return float(np.nanmean(per_class)), per_class


@dataclass
class EvalConfig:
    target_mious: tuple = (0.80, 0.85, 0.90)
    click_budget: int = 30
    variants: tuple = ("full",)
    seeds: tuple = (0,)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if any(not (0 < t <= 1) for t in self.target_mious):
            raise ValueError("targets must lie in (0, 1]")
        if self.click_budget < 1:
            raise ValueError("click budget must be >= 1")


@dataclass
class RunRecord:
    scene: str
    variant: str
    seed: int
    baseline_miou: float              # running-statistics prediction, pre warm-up
    miou_curve: List[float]           # index 0 = initial (post warm-up)
    noc_per_target: Dict[float, object]   # clicks or FAILURE
    round_seconds: List[float]
    # per refine call: (clicked points matching their corrected label, clicks)
    click_agreement: List[tuple] = field(default_factory=list)

    @property
    def initial_miou(self):
        return self.miou_curve[0]

    @property
    def final_miou(self):
        return self.miou_curve[-1]


def variant_config(name: str) -> RefineConfig:
    table = {
        "full": RefineConfig(),
        "no_stabilization": RefineConfig(no_stabilization=True),
        "no_filtering": RefineConfig(no_filtering=True),
        "no_warmup": RefineConfig(no_warmup=True),
        "keep_ga": RefineConfig(keep_ga=True),
        "ia": RefineConfig(ia_baseline=True),
        "full_adam": RefineConfig.adam_regime(),
    }
    if name not in table:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(table)}")
    return table[name]


def noc_protocol(cloud: LabeledCloud, baseline_params: segnet.NetworkParams,
                 refine_cfg: RefineConfig, sim_cfg: SimConfig,
                 targets, budget: int, variant: str = "full",
                 seed: int = 0) -> RunRecord:
    """Fresh session, warm-up, click loop until every target is hit or budget ends."""
    if cloud.labels is None:
        raise ValueError(f"scene {cloud.name!r} has no ground truth")
    if np.isscalar(targets):
        targets = (float(targets),)
    targets = tuple(float(t) for t in targets)
    top = max(targets)
    m = baseline_params.config.num_classes

    session = refine_mod.create_session(cloud, baseline_params, refine_cfg)
    baseline, _ = miou(
        segnet.forward(cloud, session.params, bn_mode=BNMode.RUNNING,
                       ctx=session.ctx).labels, cloud.labels, m)
    refine_mod.warm_up(session)
    curve = [miou(session.seg.labels, cloud.labels, m)[0]]
    round_seconds: list[float] = []
    agreement: list[tuple] = []
    clicked: set = set()
    sim = dataclasses.replace(sim_cfg, rng_seed=seed)
    while len(curve) - 1 < budget:
        if curve[-1] >= top:
            break
        recs = simulate.next_clicks(session.seg.labels, cloud.labels,
                                    cloud.positions, sim, already_clicked=clicked)
        recs = recs[: budget - (len(curve) - 1)]
        if not recs:
            break
        t0 = time.perf_counter()
        refine_mod.refine(session, recs)
        round_seconds.append(time.perf_counter() - t0)
        clicked.update(r.point_index for r in recs)
        idx = np.array([c.point_index for c in session.clicks])
        lab = np.array([c.corrected_label for c in session.clicks])
        agreement.append((int((session.seg.labels[idx] == lab).sum()), len(idx)))
        # one refinement serves the whole click batch; NoC still counts clicks
        value = miou(session.seg.labels, cloud.labels, m)[0]
        curve.extend([value] * len(recs))
    noc = {}
    for t in targets:
        hit = next((i for i, v in enumerate(curve) if v >= t), None)
        noc[t] = FAILURE if hit is None else hit
    return RunRecord(scene=cloud.name, variant=variant, seed=seed,
                     baseline_miou=baseline, miou_curve=curve,
                     noc_per_target=noc, round_seconds=round_seconds,
                     click_agreement=agreement)


# ---------------------------------------------------------------------------
# benchmark orchestration


def _run_job(args):
    (scene_path, ckpt_path, variant, seed, targets, budget, sim_cfg) = args
    cloud = load_ply(scene_path)
    params = segnet.load_params(ckpt_path)
    cfg = variant_config(variant)
    return noc_protocol(cloud, params, cfg, sim_cfg, targets, budget,
                        variant=variant, seed=seed)


def run_benchmark(manifest: dict, data_dir, checkpoint_path,
                  eval_cfg: EvalConfig, out_dir, workers: int = 1,
                  log=None) -> dict:
    """Sweep scenes x variants x seeds; write CSV, summary JSON and SVG curves."""
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"baseline checkpoint missing: {checkpoint_path}")
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for variant in eval_cfg.variants:
        variant_config(variant)  # fail fast on unknown names
        for seed in eval_cfg.seeds:
            for entry in manifest["test"]:
                jobs.append((os.path.join(data_dir, entry["path"]), checkpoint_path,
                             variant, seed, eval_cfg.target_mious,
                             eval_cfg.click_budget, eval_cfg.sim))
    records: list[RunRecord] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_job, jobs):
                records.append(rec)
                if log:
                    log(f"{rec.variant} seed={rec.seed} {rec.scene}: "
                        f"{rec.initial_miou:.3f} -> {rec.final_miou:.3f}")
    else:
        for job in jobs:
            rec = _run_job(job)
            records.append(rec)
            if log:
                log(f"{rec.variant} seed={rec.seed} {rec.scene}: "
                    f"{rec.initial_miou:.3f} -> {rec.final_miou:.3f}")
    records.sort(key=lambda r: (r.variant, r.seed, r.scene))

    write_csv(records, os.path.join(out_dir, "results.csv"))
    summary = summarize(records, eval_cfg)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    write_curves_svg(records, os.path.join(out_dir, "curves.svg"))
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    meta = {"records": len(records),
            "mean_round_seconds": float(np.mean([s for r in records
                                                 for s in r.round_seconds]))
            if any(r.round_seconds for r in records) else 0.0}
    with open(os.path.join(out_dir, "run_meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    return summary


def write_csv(records: Sequence[RunRecord], path) -> None:
    lines = ["variant,seed,scene,click,miou"]
    for r in records:
        for click, value in enumerate(r.miou_curve):
            lines.append(f"{r.variant},{r.seed},{r.scene},{click},{value:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def summarize(records: Sequence[RunRecord], eval_cfg: EvalConfig) -> dict:
    out: dict = {"variants": {}, "targets": list(eval_cfg.target_mious),
                 "click_budget": eval_cfg.click_budget}
    by_variant: dict[str, list[RunRecord]] = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    for variant, recs in sorted(by_variant.items()):
        entry = {
            "runs": len(recs),
            "mean_baseline_miou": round(float(np.mean([r.baseline_miou for r in recs])), 6),
            "mean_initial_miou": round(float(np.mean([r.initial_miou for r in recs])), 6),
            "mean_final_miou": round(float(np.mean([r.final_miou for r in recs])), 6),
            "targets": {},
        }
        for t in eval_cfg.target_mious:
            nocs = [r.noc_per_target[t] for r in recs]
            ok = [n for n in nocs if n != FAILURE]
            failures = len(nocs) - len(ok)
            entry["targets"][f"{t:.2f}"] = {
                "mean_noc": round(float(np.mean(ok)), 6) if ok else None,
                "failure_rate": round(failures / len(nocs), 6),
                "failures": failures,
            }
        out["variants"][variant] = entry
    return out


def mean_curves(records: Sequence[RunRecord]) -> Dict[str, np.ndarray]:
    """Per-variant mean curve; short curves are carried forward at their last value."""
    out = {}
    by_variant: dict[str, list[RunRecord]] = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    for variant, recs in by_variant.items():
        width = max(len(r.miou_curve) for r in recs)
        rows = []
        for r in recs:
            c = list(r.miou_curve) + [r.miou_curve[-1]] * (width - len(r.miou_curve))
            rows.append(c)
        out[variant] = np.mean(np.array(rows), axis=0)
    return out


_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
               "#8c564b", "#17becf", "#7f7f7f"]


def write_curves_svg(records: Sequence[RunRecord], path,
                     width: int = 640, height: int = 420) -> None:
    """Tiny dependency-free plot of mean mIoU against number of clicks."""
    curves = mean_curves(records)
    ml, mr, mt, mb = 50, 16, 16, 40
    pw, ph = width - ml - mr, height - mt - mb
    max_x = max((len(c) - 1 for c in curves.values()), default=1) or 1

    def sx(x):
        return ml + pw * x / max_x

    def sy(y):
        return mt + ph * (1 - y)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{width - mr}" y2="{y:.1f}" '
                     'stroke="#dddddd"/>')
        parts.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{frac:.2f}</text>')
    for click in range(0, max_x + 1, max(1, max_x // 10)):
        x = sx(click)
        parts.append(f'<text x="{x:.1f}" y="{height - mb + 16}" text-anchor="middle" '
                     f'font-size="11">{click}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 6}" text-anchor="middle" '
                 'font-size="12">clicks</text>')
    for k, (variant, curve) in enumerate(sorted(curves.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(curve))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + 8}" y="{mt + 16 + 16 * k}" fill="{color}" '
                     f'font-size="12">{variant}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
