"""SGD and Adam with switchable state accumulation.

Test-time refinement runs with accumulation disabled (ga_enabled=False):
SGD momentum and Adam's moment estimates are forced to zero so each update
depends only on the current gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np

from .tensor import DTYPE, NumericError, Tensor


@dataclass
class OptimizerConfig:
    kind: str = "sgd"                # "sgd" | "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9            # sgd
    beta1: float = 0.9               # adam
    beta2: float = 0.999             # adam
    weight_decay: float = 0.0
    epsilon: float = 1e-8            # adam
    ga_enabled: bool = True          # False -> memoryless updates

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def effective(self) -> "OptimizerConfig":
        """Config with accumulation coefficients zeroed when GA is disabled."""
        if self.ga_enabled:
            return self
        return replace(self, momentum=0.0, beta1=0.0, beta2=0.0)


@dataclass
class OptimizerState:
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            buffers={k: {n: a.copy() for n, a in bufs.items()}
                     for k, bufs in self.buffers.items()},
            step_count=self.step_count,
        )


def reset_state(state: OptimizerState) -> OptimizerState:
    """Zero all buffers and the step counter, in place."""
    for bufs in state.buffers.values():
        for a in bufs.values():
            a.fill(0)
    state.step_count = 0
    return state


def _buffers_for(state, name, tensor, keys):
    bufs = state.buffers.get(name)
    if bufs is None:
        bufs = {k: np.zeros_like(tensor.data) for k in keys}
        state.buffers[name] = bufs
    return bufs


def step(tensors: Dict[str, Tensor], config: OptimizerConfig,
         state: OptimizerState) -> None:
    """One update over named learnable tensors, reading their .grad buffers."""
    cfg = config.effective()
    lr = DTYPE(cfg.learning_rate)
    wd = DTYPE(cfg.weight_decay)
    state.step_count += 1
    t = state.step_count
    for name, w in tensors.items():
        g = w.grad
        if g is None:
            raise NumericError(f"no gradient populated for tensor {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name!r}")
        g = g + wd * w.data if wd != 0 else g
        if cfg.kind == "sgd":
            bufs = _buffers_for(state, name, w, ("velocity",))
            v = bufs["velocity"]
            v *= cfg.momentum
            v += g
            w.data -= lr * v
        else:
            bufs = _buffers_for(state, name, w, ("m", "v"))
            m, v = bufs["m"], bufs["v"]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            w.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        w.data = w.data.astype(DTYPE, copy=False)
