"""Adam with coupled L2 weight decay, and the polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .nn import ParamStore

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(params: ParamStore, grads: dict, state: AdamState, lr: float, wd: float = 0.0):
    """One Adam step over every trainable entry of ``params``.

    ``grads`` maps entry names to gradient arrays; missing names count as
    zero gradient.  Weight decay is added to the gradient before the moment
    update.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.trainable().items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if wd:
            g = g + wd * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * state.v[name] + (1 - BETA2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        params.set(name, p.data - step.astype(p.data.dtype))


def grads_by_name(params: ParamStore, grads: dict) -> dict:
    """Re-key a tensor-keyed gradient map by the store's entry names."""
    return {name: grads[t] for name, t in params.trainable().items() if t in grads}


def poly_lr(it: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - it/max_iter) ** power."""
    if max_iter <= 0:
        return lr0
    frac = min(max(it, 0), max_iter) / max_iter
    return lr0 * (1.0 - frac) ** power
