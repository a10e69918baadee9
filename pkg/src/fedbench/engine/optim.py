from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SchemaError
from .model import ModelState


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(model: ModelState, grads: dict, state: AdamState, hyper: AdamHyper = AdamHyper()) -> AdamState:
    """One Adam update of the trainable parameters, in place.

    Weight decay is added to the gradient (L2 style) before the moment updates.
    """
    names = model.trainable_names()
    if list(grads) != names:
        raise SchemaError(f"gradient names {list(grads)} do not match trainable parameters {names}")
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name in names:
        w = model.get(name)
        g = grads[name]
        if g.shape != w.shape:
            raise SchemaError(f"{name}: gradient shape {g.shape} != {w.shape}")
        if hyper.weight_decay:
            g = g + hyper.weight_decay * w
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - hyper.beta1) * g if m is None else hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = (1.0 - hyper.beta2) * g * g if v is None else hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        layer_name, key = name.rsplit(".", 1)
        model.layer(layer_name).params[key] = w - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    model.version += 1
    return state
