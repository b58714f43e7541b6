"""Click-driven test-time refinement of a segmentation session.

A session pins one cloud to one private copy of the network. warm_up()
snapshots the running-statistics prediction, switches BN to instance
statistics and fine-tunes against that snapshot. refine() then folds user
clicks into a correction energy (raw-sum cross entropy on clicked points)
plus an entropy stabilization energy gated per point by binary filter
scores, and optimizes for a few memoryless rounds per interaction.
"""

from __future__ import annotations

import base64
import warnings
from dataclasses import dataclass, field, asdict, replace
from typing import List, Optional, Sequence

import numpy as np

from . import optim, segnet
from .scene import LabeledCloud
from .segnet import (NeighborContext, NetworkParams, SegmentationState,
                     forward, forward_graph, one_hot, prepare_cloud)
from .tensor import (BNMode, ComputationTape, DTYPE, DimensionError,
                     EmptySupportError, Tensor, add, backward,
                     masked_weighted_cross_entropy, mul, row_entropy, scale,
                     sum_all, _entropy_rows)


class RefineError(Exception):
    pass


class StateError(RefineError):
    pass


class ClickValidationError(RefineError):
    def __init__(self, message, offenders):
        super().__init__(f"{message}: {offenders}")
        self.offenders = offenders


@dataclass
class RefineConfig:
    lam: float = 100.0                       # stabilization trade-off
    delta_plus: float = 0.03                 # entropy rise that drops a point
    delta_minus: float = 0.03                # entropy drop that re-admits it
    delta_probe: float = 0.03                # threshold of the probe-step reset
    warmup_rounds: int = 5
    refine_rounds_per_interaction: int = 3
    warmup_lr: float = 5e-3
    testtime_lr: float = 1e-3
    optimizer: optim.OptimizerConfig = field(default_factory=lambda: optim.OptimizerConfig(
        kind="sgd", learning_rate=1e-3, momentum=0.9, weight_decay=0.01))
    # ablation switches
    no_stabilization: bool = False
    no_filtering: bool = False
    no_warmup: bool = False
    keep_ga: bool = False
    ia_baseline: bool = False
    # whether the score update also runs after the final optimization round
    update_scores_after_final_round: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        for name in ("delta_plus", "delta_minus", "delta_probe"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.refine_rounds_per_interaction < 1:
            raise ValueError("refine_rounds_per_interaction must be >= 1")

    @classmethod
    def adam_regime(cls, **overrides) -> "RefineConfig":
        """Adaptive-optimizer settings: wider probe threshold, more rounds."""
        base = dict(
            delta_plus=0.1, delta_minus=0.01, delta_probe=0.1,
            warmup_rounds=10, refine_rounds_per_interaction=5,
            optimizer=optim.OptimizerConfig(kind="adam", beta1=0.9, beta2=0.999,
                                            weight_decay=0.5),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        d = dict(d)
        opt = d.pop("optimizer", None)
        kwargs = dict(d)
        if opt is not None:
            kwargs["optimizer"] = optim.OptimizerConfig(**opt)
        return cls(**kwargs)


@dataclass
class InteractionRecord:
    point_index: int
    corrected_label: int
    round: int = 0
    source: str = "human"            # "human" | "simulator"


@dataclass
class RoundTrace:
    loss: float
    correction: float
    stabilization: float
    labels_changed: int


@dataclass
class RefineResult:
    seg: SegmentationState
    trace: List[RoundTrace]
    changed_indices: np.ndarray


class RefinementSession:
    """All mutable state of one interactive refinement: single-writer."""

    def __init__(self, cloud: LabeledCloud, params: NetworkParams,
                 config: RefineConfig, ctx: Optional[NeighborContext] = None):
        self.cloud = cloud
        self.config = config
        self.params = params.copy()      # sessions never share parameters
        self.ctx = ctx or prepare_cloud(cloud, params.config.knn_k)
        self.num_classes = params.config.num_classes
        self.warmed = False
        self.pre_warmup_prediction: Optional[np.ndarray] = None   # one-hot snapshot
        self.initial_prediction: Optional[np.ndarray] = None      # post warm-up one-hot
        self.seg: Optional[SegmentationState] = None
        self.filter_scores = np.ones(cloud.num_points, dtype=DTYPE)
        self.clicks: List[InteractionRecord] = []         # active, unique per point
        self.click_history: List[InteractionRecord] = []  # append-only, for replay
        self.prev_entropies: Optional[np.ndarray] = None
        self.round_counter = 0
        self.tt_opt_state = optim.OptimizerState()
        self.energy_log: List[List[RoundTrace]] = []
        self._features = Tensor(cloud.features)

    # -- helpers -----------------------------------------------------------

    def pre_warmup_labels(self) -> np.ndarray:
        if self.pre_warmup_prediction is None:
            raise StateError("session not warmed up yet")
        return np.argmax(self.pre_warmup_prediction, axis=1)

    def click_arrays(self):
        idx = np.array([c.point_index for c in self.clicks], dtype=np.int64)
        lab = np.array([c.corrected_label for c in self.clicks], dtype=np.int64)
        return idx, lab

    def _infer(self) -> SegmentationState:
        return forward(self.cloud, self.params, ctx=self.ctx)

    def _record_clicks(self, new_clicks: Sequence[InteractionRecord]):
        idx_ok = []
        offenders = []
        n, m = self.cloud.num_points, self.num_classes
        for c in new_clicks:
            if not (0 <= c.point_index < n) or not (0 <= c.corrected_label < m):
                offenders.append((c.point_index, c.corrected_label))
            else:
                idx_ok.append(c)
        if offenders:
            raise ClickValidationError("invalid point index or class", offenders)
        for c in idx_ok:
            if self.seg is not None and self.seg.labels[c.point_index] == c.corrected_label:
                warnings.warn(
                    f"click at point {c.point_index} repeats the current prediction",
                    stacklevel=3)
            rec = InteractionRecord(c.point_index, c.corrected_label,
                                    round=self.round_counter, source=c.source)
            self.click_history.append(rec)
            # a re-click replaces the earlier record for that point
            self.clicks = [k for k in self.clicks if k.point_index != rec.point_index]
            self.clicks.append(rec)


def create_session(cloud: LabeledCloud, params: NetworkParams,
                   config: RefineConfig,
                   ctx: Optional[NeighborContext] = None) -> RefinementSession:
    return RefinementSession(cloud, params, config, ctx)


# ---------------------------------------------------------------------------
# energies (plain numpy; the optimization path builds its own graph)


def correction_energy(seg: SegmentationState, clicks: Sequence[InteractionRecord]) -> float:
    """Raw-sum cross entropy over the clicked points against their corrected labels."""
    if not clicks:
        raise EmptySupportError("correction energy needs at least one click")
    idx = np.array([c.point_index for c in clicks])
    lab = np.array([c.corrected_label for c in clicks])
    p = np.clip(seg.probs[idx, lab], 1e-12, 1.0)
    return float(-np.log(p).sum(dtype=np.float64))


def stabilization_energy(seg: SegmentationState, filter_scores: np.ndarray) -> float:
    """Mean over all points of entropy gated by the binary filter scores."""
    ent = _entropy_rows(seg.probs)
    return float((filter_scores * ent).sum(dtype=np.float64) / len(ent))


def test_time_loss(seg, clicks, filter_scores, lam: float) -> float:
    return correction_energy(seg, clicks) + lam * stabilization_energy(seg, filter_scores)


# ---------------------------------------------------------------------------
# warm-up


def warm_up(session: RefinementSession) -> RefinementSession:
    """Snapshot the running-statistics prediction, relax BN, self-fine-tune.

    With the no_warmup ablation the snapshot and the switch to instance
    statistics still happen (test-time training needs them); only the
    self-supervised optimization is skipped.
    """
    if session.warmed:
        raise StateError("warm_up called twice on one session")
    if session.clicks:
        raise StateError("warm_up must precede any interaction")
    cfg = session.config
    running_seg = forward(session.cloud, session.params, bn_mode=BNMode.RUNNING,
                          ctx=session.ctx)
    qhat = one_hot(running_seg.labels, session.num_classes)
    session.pre_warmup_prediction = qhat
    session.params.set_bn_mode(BNMode.INSTANCE)

    if not cfg.no_warmup and cfg.warmup_rounds > 0:
        n = session.cloud.num_points
        opt_cfg = replace(cfg.optimizer, learning_rate=cfg.warmup_lr, ga_enabled=True)
        state = optim.OptimizerState()
        target = Tensor(qhat)
        mask = Tensor(np.ones(n, dtype=DTYPE))
        for _ in range(cfg.warmup_rounds):
            with ComputationTape() as tape:
                _, probs = forward_graph(session._features, session.params,
                                         session.ctx, bn_mode=BNMode.INSTANCE)
                loss = scale(masked_weighted_cross_entropy(probs, target, mask), 1.0 / n)
                backward(loss, tape)
            optim.step(session.params.named_tensors(), opt_cfg, state)
            session.params.zero_grads()

    session.seg = session._infer()
    session.initial_prediction = one_hot(session.seg.labels, session.num_classes)
    session.prev_entropies = session.seg.entropies
    session.warmed = True
    return session


# ---------------------------------------------------------------------------
# filter scores


def update_filter_scores(scores: np.ndarray, prev_entropies: np.ndarray,
                         new_entropies: np.ndarray, delta_plus: float,
                         delta_minus: float) -> np.ndarray:
    """Three-case update on the entropy change between adjacent rounds."""
    if not (len(scores) == len(prev_entropies) == len(new_entropies)):
        raise DimensionError("score/entropy lengths disagree")
    d = new_entropies - prev_entropies
    out = scores.copy()
    out[d < -delta_minus] = 1.0
    out[d > delta_plus] = 0.0
    return out


def _loss_graph(session: RefinementSession, probs: Tensor,
                scores: np.ndarray):
    """Correction + lam * stabilization on the live graph; returns tensors."""
    cfg = session.config
    n = session.cloud.num_points
    idx, lab = session.click_arrays()
    corr = None
    if len(idx):
        click_mask = np.zeros(n, dtype=DTYPE)
        click_mask[idx] = 1.0
        targets = np.zeros((n, session.num_classes), dtype=DTYPE)
        targets[idx, lab] = 1.0
        corr = masked_weighted_cross_entropy(probs, Tensor(targets),
                                             Tensor(click_mask))
    if cfg.no_stabilization:
        return corr, corr, None
    ent = row_entropy(probs)
    stab = scale(sum_all(mul(ent, Tensor(scores))), 1.0 / n)
    scaled = scale(stab, cfg.lam)
    loss = scaled if corr is None else add(corr, scaled)
    return loss, corr, stab


def evaluate_filter_scores(session: RefinementSession) -> np.ndarray:
    """Probe step on a throwaway copy of the network.

    All scores start at 1; after one update on the clone, points whose
    entropy grew by at least delta_probe are scored 0. The live parameters
    are never touched.
    """
    if not session.clicks:
        raise StateError("filter score evaluation requires at least one click")
    cfg = session.config
    clone = session.params.copy()
    ones = np.ones(session.cloud.num_points, dtype=DTYPE)

    before = forward(session.cloud, clone, ctx=session.ctx).entropies
    probe_cfg = replace(cfg.optimizer, learning_rate=cfg.testtime_lr, ga_enabled=True)
    probe_state = optim.OptimizerState()
    with ComputationTape() as tape:
        _, probs = forward_graph(session._features, clone, session.ctx)
        loss, _, _ = _loss_graph(session, probs, ones)
        backward(loss, tape)
    optim.step(clone.named_tensors(), probe_cfg, probe_state)
    after = forward(session.cloud, clone, ctx=session.ctx).entropies

    delta = after - before
    return np.where(delta >= cfg.delta_probe, 0.0, 1.0).astype(DTYPE)


# ---------------------------------------------------------------------------
# refinement rounds


def refine(session: RefinementSession,
           new_clicks: Sequence[InteractionRecord]) -> RefineResult:
    """One interaction round: record clicks, reset scores, optimize T rounds."""
    cfg = session.config
    if cfg.ia_baseline:
        return ia_baseline_refine(session, new_clicks)
    if not session.warmed:
        raise StateError("session must be warmed up before refinement")
    session._record_clicks(new_clicks)
    if not session.clicks:
        if cfg.no_stabilization or cfg.lam == 0:
            # zero clicks and no stabilization pressure: the loss is
            # identically zero, so the round is a recorded no-op
            session.round_counter += 1
            session.energy_log.append([])
            return RefineResult(session.seg, [], np.empty(0, dtype=np.int64))
        raise StateError("refine needs at least one recorded click")

    if cfg.no_stabilization or cfg.no_filtering:
        session.filter_scores = np.ones(session.cloud.num_points, dtype=DTYPE)
    else:
        session.filter_scores = evaluate_filter_scores(session)

    opt_cfg = replace(cfg.optimizer, learning_rate=cfg.testtime_lr,
                      ga_enabled=cfg.keep_ga)
    labels_before = session.seg.labels.copy()
    trace: list[RoundTrace] = []
    rounds = cfg.refine_rounds_per_interaction
    for r in range(rounds):
        prev_entropies = session.seg.entropies
        prev_labels = session.seg.labels
        with ComputationTape() as tape:
            _, probs = forward_graph(session._features, session.params, session.ctx)
            loss, corr, stab = _loss_graph(session, probs, session.filter_scores)
            backward(loss, tape)
        optim.step(session.params.named_tensors(), opt_cfg, session.tt_opt_state)
        session.params.zero_grads()
        session.seg = session._infer()
        if (not cfg.no_stabilization and not cfg.no_filtering
                and (r < rounds - 1 or cfg.update_scores_after_final_round)):
            session.filter_scores = update_filter_scores(
                session.filter_scores, prev_entropies, session.seg.entropies,
                cfg.delta_plus, cfg.delta_minus)
        trace.append(RoundTrace(
            loss=float(loss.data),
            correction=float(corr.data) if corr is not None else 0.0,
            stabilization=float(stab.data) if stab is not None else 0.0,
            labels_changed=int((prev_labels != session.seg.labels).sum()),
        ))
    session.prev_entropies = session.seg.entropies
    session.round_counter += 1
    session.energy_log.append(trace)
    changed = np.nonzero(labels_before != session.seg.labels)[0]
    return RefineResult(session.seg, trace, changed)


def ia_baseline_refine(session: RefinementSession,
                       new_clicks: Sequence[InteractionRecord]) -> RefineResult:
    """Static-pseudo-label baseline: unclicked points keep chasing the initial
    post-warm-up prediction; no entropy term, no filtering."""
    if not session.warmed:
        raise StateError("session must be warmed up before refinement")
    session._record_clicks(new_clicks)
    if not session.clicks:
        raise StateError("refine needs at least one recorded click")
    cfg = session.config
    n = session.cloud.num_points
    idx, lab = session.click_arrays()
    targets = session.initial_prediction.copy()
    targets[idx] = 0.0
    targets[idx, lab] = 1.0
    click_mask = np.zeros(n, dtype=DTYPE)
    click_mask[idx] = 1.0
    rest_mask = (1.0 - click_mask).astype(DTYPE)
    t_targets, t_click, t_rest = Tensor(targets), Tensor(click_mask), Tensor(rest_mask)

    opt_cfg = replace(cfg.optimizer, learning_rate=cfg.testtime_lr,
                      ga_enabled=cfg.keep_ga)
    labels_before = session.seg.labels.copy()
    trace: list[RoundTrace] = []
    for _ in range(cfg.refine_rounds_per_interaction):
        prev_labels = session.seg.labels
        with ComputationTape() as tape:
            _, probs = forward_graph(session._features, session.params, session.ctx)
            loss = masked_weighted_cross_entropy(probs, t_targets, t_click)
            corr_value = float(loss.data)
            if np.any(rest_mask):
                pseudo = scale(masked_weighted_cross_entropy(probs, t_targets, t_rest),
                               1.0 / n)
                loss = add(loss, pseudo)
            backward(loss, tape)
        optim.step(session.params.named_tensors(), opt_cfg, session.tt_opt_state)
        session.params.zero_grads()
        session.seg = session._infer()
        trace.append(RoundTrace(
            loss=float(loss.data), correction=corr_value, stabilization=0.0,
            labels_changed=int((prev_labels != session.seg.labels).sum()),
        ))
    session.prev_entropies = session.seg.entropies
    session.round_counter += 1
    session.energy_log.append(trace)
    changed = np.nonzero(labels_before != session.seg.labels)[0]
    return RefineResult(session.seg, trace, changed)


# ---------------------------------------------------------------------------
# export / replay


def encode_array(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode()


def decode_array(text: str, dtype: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype).copy()


def export_session(session: RefinementSession) -> dict:
    """JSON-ready document: config, click log, energy trace, label arrays."""
    doc = {
        "format": "ipcs-session/1",
        "scene": session.cloud.name,
        "num_points": session.cloud.num_points,
        "num_classes": session.num_classes,
        "rounds": session.round_counter,
        "config": session.config.to_dict(),
        "clicks": [asdict(c) for c in session.click_history],
        "energy_trace": [[asdict(t) for t in rnd] for rnd in session.energy_log],
        "labels": {
            "encoding": "base64/int32-le",
            "initial": encode_array(np.argmax(session.initial_prediction, axis=1), "<i4")
            if session.initial_prediction is not None else None,
            "current": encode_array(session.seg.labels, "<i4")
            if session.seg is not None else None,
        },
    }
    return doc


def replay_session(cloud: LabeledCloud, params: NetworkParams,
                   exported: dict,
                   ctx: Optional[NeighborContext] = None) -> RefinementSession:
    """Rebuild a session from an export and re-apply its click log."""
    config = RefineConfig.from_dict(exported["config"])
    session = create_session(cloud, params, config, ctx)
    warm_up(session)
    by_round: dict[int, list[InteractionRecord]] = {}
    for c in exported["clicks"]:
        rec = InteractionRecord(**c)
        by_round.setdefault(rec.round, []).append(rec)
    for rnd in range(exported["rounds"]):
        refine(session, by_round.get(rnd, []))
    return session
