"""Minimal point-cloud segmentation network.

Pointwise linear/BN/ReLU blocks with one local-context stage that
concatenates each point's features with the mean over its k nearest
neighbors. Weights are shared across points, so a loss on a sparse subset
of points moves predictions everywhere; BN layers carry the running
statistics that test-time adaptation relies on.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from . import optim
from .scene import LabeledCloud
from .tensor import (BatchNormState, BNMode, ComputationTape, DTYPE,
                     DimensionError, NumericError, Tensor, add, backward,
                     batch_norm, concat_cols, masked_weighted_cross_entropy,
                     matmul, no_tape, relu, scale, softmax,
                     sparse_row_mix, _entropy_rows)


class SizeError(Exception):
    pass


class CheckpointError(Exception):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    input_dim: int = 6
    hidden_dims: tuple = (64, 64, 128)
    num_classes: int = 8
    knn_k: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")

    @property
    def aggregate_after(self) -> int:
        # local-context stage follows the second block (or the only block)
        return min(2, len(self.hidden_dims))

    def canonical_json(self) -> str:
        return json.dumps({
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "knn_k": self.knn_k,
            "seed": self.seed,
        }, sort_keys=True)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass
class SegmentationState:
    logits: np.ndarray       # N x M
    probs: np.ndarray        # N x M
    labels: np.ndarray       # N, argmax of probs (lowest index wins ties)
    entropies: np.ndarray    # N, Shannon entropy of probs in nats


def state_from_logits(logits: np.ndarray, probs: np.ndarray) -> SegmentationState:
    return SegmentationState(
        logits=logits,
        probs=probs,
        labels=np.argmax(probs, axis=1),
        entropies=_entropy_rows(probs),
    )


class NetworkParams:
    """All learnable tensors plus per-layer BN state for one SegNetConfig."""

    def __init__(self, config: SegNetConfig, blocks, head_w: Tensor, head_b: Tensor):
        self.config = config
        self.blocks = blocks            # list of dicts {w, b, bn}
        self.head_w = head_w
        self.head_b = head_b
        self.fingerprint = config.fingerprint()

    def named_tensors(self) -> dict:
        """Learnable tensors only; BN running statistics are excluded."""
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.w"] = blk["w"]
            out[f"block{i}.b"] = blk["b"]
            out[f"block{i}.gamma"] = blk["bn"].gamma
            out[f"block{i}.beta"] = blk["bn"].beta
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def bn_states(self) -> List[BatchNormState]:
        return [blk["bn"] for blk in self.blocks]

    def set_bn_mode(self, mode: BNMode):
        for st in self.bn_states():
            st.mode = mode
    def zero_grads(self):
        for t in self.named_tensors().values():
            t.zero_grad()

    def copy(self) -> "NetworkParams":
        blocks = [{"w": blk["w"].copy(), "b": blk["b"].copy(), "bn": blk["bn"].copy()}
                  for blk in self.blocks]
        return NetworkParams(self.config, blocks, self.head_w.copy(), self.head_b.copy())

    def flat_snapshot(self) -> np.ndarray:
        """Concatenation of every numeric buffer, for bit-exact comparisons."""
        parts = [t.data.ravel() for t in self.named_tensors().values()]
        for st in self.bn_states():
            parts += [st.running_mu, st.running_sigma2]
        return np.concatenate(parts)


def init_params(config: SegNetConfig) -> NetworkParams:
    """Fan-in scaled symmetric uniform init; BN starts as identity statistics."""
    rng = np.random.default_rng(config.seed)
    blocks = []
    d = config.input_dim
    for i, h in enumerate(config.hidden_dims):
        bound = 1.0 / np.sqrt(d)
        w = Tensor(rng.uniform(-bound, bound, size=(d, h)), requires_grad=True)
        b = Tensor(np.zeros(h), requires_grad=True)
        blocks.append({"w": w, "b": b, "bn": BatchNormState(h)})
        d = 2 * h if (i + 1) == config.aggregate_after else h
    bound = 1.0 / np.sqrt(d)
    head_w = Tensor(rng.uniform(-bound, bound, size=(d, config.num_classes)),
                    requires_grad=True)
    head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return NetworkParams(config, blocks, head_w, head_b)


# ---------------------------------------------------------------------------
# neighborhoods


def knn_index(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest other points per point; distance ties break toward lower index."""
    n = len(positions)
    if n <= k:
        raise SizeError(f"need more than k={k} points, got {n}")
    pos = np.asarray(positions, dtype=np.float64)
    m = min(n, k + 17)  # margin so self-exclusion and tie-breaks have slack
    from scipy.spatial import cKDTree
    dist, idx = cKDTree(pos).query(pos, k=m, workers=-1)
    # candidates ascending by index, then a stable sort by distance breaks ties low
    by_index = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, by_index, axis=1)
    dist = np.take_along_axis(dist, by_index, axis=1)
    dist[idx == np.arange(n)[:, None]] = np.inf  # never one's own neighbor
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(idx, order, axis=1).astype(np.int64)


@dataclass
class NeighborContext:
    """Per-cloud cache: neighbor table and the sparse averaging operator."""

    neighbors: np.ndarray
    mat: sp.csr_matrix
    mat_t: sp.csr_matrix


def prepare_cloud(cloud: LabeledCloud, k: int) -> NeighborContext:
    nbr = knn_index(cloud.positions, k)
    n = len(nbr)
    rows = np.repeat(np.arange(n), k)
    mat = sp.csr_matrix((np.full(n * k, 1.0 / k, dtype=DTYPE),
                         (rows, nbr.ravel())), shape=(n, n))
    return NeighborContext(neighbors=nbr, mat=mat, mat_t=mat.T.tocsr())


# ---------------------------------------------------------------------------
# forward


def forward_graph(features: Tensor, params: NetworkParams, ctx: NeighborContext,
                  bn_mode: Optional[BNMode] = None, update_running: bool = False
                  ) -> Tuple[Tensor, Tensor]:
    """Differentiable forward pass; records on the active tape."""
    cfg = params.config
    if features.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"expected {cfg.input_dim} input channels, got {features.shape[1]}")
    x = features
    for i, blk in enumerate(params.blocks):
        x = add(matmul(x, blk["w"]), blk["b"])
        x = batch_norm(x, blk["bn"], mode=bn_mode, update_running=update_running)
        x = relu(x)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after block {i}")
        if (i + 1) == cfg.aggregate_after:
            x = concat_cols(x, sparse_row_mix(ctx.mat, ctx.mat_t, x, "neighbor_mean"))
    logits = add(matmul(x, params.head_w), params.head_b)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits at head")
    return logits, softmax(logits)


def forward(cloud: LabeledCloud, params: NetworkParams,
            bn_mode: Optional[BNMode] = None,
            ctx: Optional[NeighborContext] = None) -> SegmentationState:
    """Inference: no tape, no gradient bookkeeping."""
    if ctx is None:
        ctx = prepare_cloud(cloud, params.config.knn_k)
    with no_tape():
        logits, probs = forward_graph(Tensor(cloud.features), params, ctx,
                                      bn_mode=bn_mode)
    return state_from_logits(logits.data, probs.data)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# supervised pre-training


def train_supervised(train_set: Iterable[LabeledCloud], config: SegNetConfig,
                     optimizer_config: optim.OptimizerConfig, epochs: int,
                     log=None) -> Tuple[NetworkParams, List[float]]:
    """One cloud per step, cross entropy on all labeled points.

    BN normalizes with instance statistics and updates the running values by
    EMA (factor 0.9) each step, like ordinary mini-batch training.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("empty train set")
    for c in train_set:
        if c.labels is None:
            raise ValueError(f"cloud {c.name!r} has no labels")
    params = init_params(config)
    contexts = [prepare_cloud(c, config.knn_k) for c in train_set]
    state = optim.OptimizerState()
    rng = np.random.default_rng(config.seed + 9999)
    epoch_losses: list[float] = []
    ones_masks = [Tensor(np.ones(c.num_points, dtype=DTYPE)) for c in train_set]
    targets = [Tensor(one_hot(c.labels, config.num_classes)) for c in train_set]
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for idx in order:
            cloud, ctx = train_set[idx], contexts[idx]
            with ComputationTape() as tape:
                _, probs = forward_graph(Tensor(cloud.features), params, ctx,
                                         bn_mode=BNMode.INSTANCE,
                                         update_running=True)
                loss = scale(masked_weighted_cross_entropy(
                    probs, targets[idx], ones_masks[idx]), 1.0 / cloud.num_points)
                backward(loss, tape)
            optim.step(params.named_tensors(), optimizer_config, state)
            params.zero_grads()
            total += float(loss.data)
        epoch_losses.append(total / len(train_set))
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {epoch_losses[-1]:.4f}")
    return params, epoch_losses


# ---------------------------------------------------------------------------
# checkpoints: "IPCS" container with named little-endian float32 arrays

_MAGIC = b"IPCS"
_VERSION = 1


def _named_arrays(params: NetworkParams) -> List[Tuple[str, np.ndarray]]:
    out = []
    for i, blk in enumerate(params.blocks):
        st = blk["bn"]
        out += [
            (f"block{i}.w", blk["w"].data),
            (f"block{i}.b", blk["b"].data),
            (f"block{i}.gamma", st.gamma.data),
            (f"block{i}.beta", st.beta.data),
            (f"block{i}.running_mu", st.running_mu),
            (f"block{i}.running_sigma2", st.running_sigma2),
        ]
    out += [("head.w", params.head_w.data), ("head.b", params.head_b.data)]
    return out


def save_params(params: NetworkParams, path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    cfg = params.config.canonical_json().encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    fp = params.fingerprint.encode()
    buf.write(struct.pack("<I", len(fp)))
    buf.write(fp)
    arrays = _named_arrays(params)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def load_params(path, expected_config: Optional[SegNetConfig] = None) -> NetworkParams:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != _MAGIC:
            raise CheckpointError("not an IPCS checkpoint")
        version = struct.unpack("<I", _read(f, 4, "version"))[0]
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        clen = struct.unpack("<I", _read(f, 4, "config length"))[0]
        cfg_dict = json.loads(_read(f, clen, "config"))
        config = SegNetConfig(
            input_dim=cfg_dict["input_dim"],
            hidden_dims=tuple(cfg_dict["hidden_dims"]),
            num_classes=cfg_dict["num_classes"],
            knn_k=cfg_dict["knn_k"],
            seed=cfg_dict["seed"],
        )
        flen = struct.unpack("<I", _read(f, 4, "fingerprint length"))[0]
        fp = _read(f, flen, "fingerprint").decode()
        if fp != config.fingerprint():
            raise CheckpointError("fingerprint does not match embedded config")
        if expected_config is not None and expected_config.fingerprint() != fp:
            raise IncompatibleCheckpointError(
                "checkpoint was written for a different architecture")
        count = struct.unpack("<I", _read(f, 4, "array count"))[0]
        arrays = {}
        for _ in range(count):
            nlen = struct.unpack("<I", _read(f, 4, "name length"))[0]
            name = _read(f, nlen, "name").decode()
            ndim = struct.unpack("<I", _read(f, 4, "ndim"))[0]
            shape = tuple(struct.unpack("<I", _read(f, 4, "dim"))[0]
                          for _ in range(ndim))
            numel = int(np.prod(shape)) if shape else 1
            raw = _read(f, numel * 4, f"array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    params = init_params(config)
    for i, blk in enumerate(params.blocks):
        st = blk["bn"]
        try:
            blk["w"].data = arrays[f"block{i}.w"]
            blk["b"].data = arrays[f"block{i}.b"]
            st.gamma.data = arrays[f"block{i}.gamma"]
            st.beta.data = arrays[f"block{i}.beta"]
            st.running_mu = arrays[f"block{i}.running_mu"]
            st.running_sigma2 = arrays[f"block{i}.running_sigma2"]
        except KeyError as e:
            raise CheckpointError(f"missing array {e.args[0]!r}") from e
    if "head.w" not in arrays or "head.b" not in arrays:
        raise CheckpointError("missing head arrays")
    params.head_w.data = arrays["head.w"]
    params.head_b.data = arrays["head.b"]
    return params
