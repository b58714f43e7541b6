"""Dense float32 tensors with reverse-mode automatic differentiation.

Operations execute eagerly on numpy arrays and, when a ComputationTape is
active and an input requires gradients, append a record to the tape.
backward() replays the tape in reverse and accumulates gradients into the
.grad buffers of every tensor that requires them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32
PROB_FLOOR = 1e-12  # probabilities are clamped to [PROB_FLOOR, 1] before log


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    pass


class NumericError(TensorError):
    pass


class ContractError(TensorError):
    pass


class EmptySupportError(TensorError):
    pass


class GraphError(TensorError):
    pass


class DegenerateBatchError(TensorError):
    pass


class Tensor:
    """A dense float32 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class _OpRecord:
    name: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """Ordered record of differentiable operations (inputs always precede use)."""

    def __init__(self):
        self._ops: list[_OpRecord] = []

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def op_names(self):
        return [op.name for op in self._ops]


_TAPE_STACK: list[Optional[ComputationTape]] = []


class no_tape:
    """Context that suppresses recording, e.g. for pure inference."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return None

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> Optional[ComputationTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _apply(name, out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._ops.append(_OpRecord(name, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor on the tape.

    Repeated calls without zeroing accumulate; the caller controls resets.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.shape}")
    produced = {id(op.output) for op in tape._ops}
    if id(loss) not in produced:
        raise GraphError("loss tensor was not produced by this tape")

    # id -> (tensor, accumulated upstream gradient)
    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }

    def attach(t: Tensor, g: np.ndarray):
        if t.grad is None:
            t.grad = g.astype(DTYPE, copy=True)
        else:
            t.grad = t.grad + g.astype(DTYPE, copy=False)

    for op in reversed(tape._ops):
        got = pending.pop(id(op.output), None)
        if got is None:
            continue
        _, g = got
        attach(op.output, g)
        for t, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            prev = pending.get(id(t))
            pending[id(t)] = (t, gi if prev is None else prev[1] + gi)

    # whatever is left never had a producing op on this tape: leaves
    for t, g in pending.values():
        attach(t, g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply("add", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _apply("mul", out, (a, b), vjp)


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = DTYPE(alpha)
    return _apply("scale", a.data * alpha, (a,), lambda g: (g * alpha,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _apply("matmul", out, (a, b), vjp)


def sparse_row_mix(mat, mat_t, x: Tensor, name="sparse_row_mix") -> Tensor:
    """y = mat @ x for a constant scipy.sparse matrix (e.g. neighbor averaging)."""
    out = np.asarray(mat @ x.data, dtype=DTYPE)

    def vjp(g):
        return (np.asarray(mat_t @ g, dtype=DTYPE),)

    return _apply(name, out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _apply("relu", out, (x,), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols row counts disagree: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    na = a.shape[1]

    def vjp(g):
        return g[:, :na], g[:, na:]

    return _apply("concat_cols", out, (a, b), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=DTYPE)

    def vjp(g):
        return (np.full_like(x.data, g),)

    return _apply("sum_all", out, (x,), vjp)


# ---------------------------------------------------------------------------
# batch normalization


class BNMode(Enum):
    RUNNING = "running"      # normalize with stored running statistics
    INSTANCE = "instance"    # normalize with the current batch's own statistics


class BatchNormState:
    """Per-channel affine parameters plus running statistics for one BN layer."""

    def __init__(self, num_channels: int, epsilon: float = 1e-5,
                 mode: BNMode = BNMode.RUNNING):
        if epsilon <= 0:
            raise ContractError("epsilon must be positive")
        self.gamma = Tensor(np.ones(num_channels), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels), requires_grad=True)
        self.running_mu = np.zeros(num_channels, dtype=DTYPE)
        self.running_sigma2 = np.ones(num_channels, dtype=DTYPE)
        self.epsilon = float(epsilon)
        self.mode = mode

    @property
    def num_channels(self):
        return self.gamma.data.shape[0]

    def validate(self):
        c = self.num_channels
        if not (self.beta.data.shape == (c,) and self.running_mu.shape == (c,)
                and self.running_sigma2.shape == (c,)):
            raise DimensionError("BN per-channel fields must share one length")
        if np.any(self.running_sigma2 < 0):
            raise ContractError("running variance must be non-negative")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")

    def copy(self) -> "BatchNormState":
        st = BatchNormState(self.num_channels, self.epsilon, self.mode)
        st.gamma = self.gamma.copy()
        st.beta = self.beta.copy()
        st.running_mu = self.running_mu.copy()
        st.running_sigma2 = self.running_sigma2.copy()
        return st


def batch_norm(x: Tensor, st: BatchNormState, mode: Optional[BNMode] = None,
               update_running: bool = False, momentum: float = 0.9) -> Tensor:
    """y = gamma * (x - mu) / sqrt(sigma^2 + eps) + beta over the row axis.

    RUNNING mode reads the stored statistics and never looks at the batch;
    INSTANCE mode computes mu/sigma^2 from x and leaves the stored values
    untouched unless update_running is set (exponential moving average).
    """
    mode = st.mode if mode is None else mode
    if x.data.ndim != 2 or x.shape[1] != st.num_channels:
        raise DimensionError(
            f"batch_norm channel mismatch: input {x.shape}, state {st.num_channels}")
    n = x.shape[0]
    eps = DTYPE(st.epsilon)
    gamma, beta = st.gamma, st.beta

    if mode is BNMode.RUNNING:
        mu = st.running_mu
        var = st.running_sigma2
        inv_std = 1.0 / np.sqrt(var + eps, dtype=DTYPE)
        xhat = (x.data - mu) * inv_std
        out = gamma.data * xhat + beta.data

        def vjp(g):
            return (g * gamma.data * inv_std,
                    (g * xhat).sum(axis=0),
                    g.sum(axis=0))

        return _apply("batch_norm.running", out, (x, gamma, beta), vjp)

    if n == 0:
        raise DegenerateBatchError("instance statistics undefined for an empty batch")
    mu = x.data.mean(axis=0, dtype=DTYPE)
    var = x.data.var(axis=0, dtype=DTYPE)  # biased, matches the normalizer
    if update_running:
        st.running_mu = momentum * st.running_mu + (1 - momentum) * mu
        st.running_sigma2 = momentum * st.running_sigma2 + (1 - momentum) * var
        st.running_mu = st.running_mu.astype(DTYPE)
        st.running_sigma2 = st.running_sigma2.astype(DTYPE)
    inv_std = 1.0 / np.sqrt(var + eps, dtype=DTYPE)
    xhat = (x.data - mu) * inv_std

    out = gamma.data * xhat + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        # biased-variance batch-norm backward
        dx = inv_std / n * (n * dxhat
                            - dxhat.sum(axis=0)
                            - xhat * (dxhat * xhat).sum(axis=0))
        return dx.astype(DTYPE), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _apply("batch_norm.instance", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# probabilistic heads


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax expects N x M with M >= 2, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax received non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _apply("softmax", p, (logits,), vjp)


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    pc = np.clip(p, PROB_FLOOR, 1.0)
    return -(pc * np.log(pc)).sum(axis=1, dtype=DTYPE)


def row_entropy(p: Tensor) -> Tensor:
    """Per-row Shannon entropy in nats (non-negative; 0*log 0 := 0)."""
    if p.data.ndim != 2:
        raise DimensionError(f"row_entropy expects N x M, got {p.shape}")
    sums = p.data.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > 1e-3):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractError(f"rows must be probability vectors (max deviation {worst:.2e})")
    out = _entropy_rows(p.data)

    def vjp(g):
        pc = np.clip(p.data, PROB_FLOOR, 1.0)
        d = -(np.log(pc) + 1.0)
        d[p.data < PROB_FLOOR] = 0.0
        return (g[:, None] * d,)

    return _apply("row_entropy", out, (p,), vjp)


def masked_weighted_cross_entropy(p: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Raw-sum cross entropy -sum_i mask_i sum_m targets[i,m] log p[i,m].

    The caller owns any normalization (sum over clicked points vs mean over
    all points).
    """
    if p.shape != targets.shape:
        raise DimensionError(f"p {p.shape} and targets {targets.shape} disagree")
    if mask.data.shape != (p.shape[0],):
        raise DimensionError(f"mask shape {mask.data.shape} must be ({p.shape[0]},)")
    mvals = mask.data
    if not np.all((mvals == 0) | (mvals == 1)):
        raise ContractError("mask entries must be 0 or 1")
    if not np.any(mvals):
        raise EmptySupportError("cross entropy over an empty mask is undefined")
    pc = np.clip(p.data, PROB_FLOOR, 1.0)
    out = -(mvals[:, None] * targets.data * np.log(pc)).sum(dtype=DTYPE)

    def vjp(g):
        dp = -(mvals[:, None] * targets.data) / pc
        dp[p.data < PROB_FLOOR] = 0.0
        return (g * dp, None, None)

    return _apply("masked_wce", out, (p, targets, mask), vjp)
