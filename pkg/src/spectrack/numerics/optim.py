"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class OptState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_opt_state(params: ParamStore, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 1e-4) -> OptState:
    state = OptState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, t in params.trainable_items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: OptState) -> None:
    """One decoupled-weight-decay Adam update; mutates params and state."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.trainable_items():
        if name not in grads or grads[name] is None:
            raise KeyError(f"missing gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data * (1.0 - state.lr * state.weight_decay) \
            - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def step_from_grads(params: ParamStore, state: OptState) -> None:
    """adamw_step using the gradients accumulated on the parameter tensors."""
    grads = {n: t.grad for n, t in params.trainable_items()}
    for n, g in grads.items():
        if g is None:
            raise KeyError(f"missing gradient for trainable parameter {n!r}")
    adamw_step(params, grads, state)
