"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def config(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}

    @classmethod
    def from_config(cls, cfg):
        return cls(**{k: cfg[k] for k in ("lr", "beta1", "beta2", "epsilon") if k in cfg})


def adam_step(params, state, grads=None):
    """Apply one Adam update in place.

    ``params`` maps names to tensors. Gradients are read from ``grads`` (same
    keys) when given, otherwise from each tensor's ``.grad``; a missing
    gradient counts as zero. ``state.step_count`` advances by exactly one.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {m.shape}, parameter has {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.data -= step.astype(p.dtype, copy=False)
    return params, state
