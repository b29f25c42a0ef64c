"""Adam with decoupled weight decay and a step-decay learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics

DEFAULT_LRS = {"backbone": 1e-5, "gnn": 1e-4, "classifier": 1e-4, "discriminator": 1e-4}


@dataclass
class AdamState:
    base_lr: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    weight_decay: float = 5e-5
    decay_factor: float = 0.5
    decay_every: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, group, epoch):
        return self.base_lr[group] * self.decay_factor ** (epoch // self.decay_every)


def adam_step(params, state, epoch, groups=None):
    """One Adam update of every parameter (or only those in ``groups``), then
    clear the gradients.

    A parameter whose ``.grad`` is missing is left untouched (no decay
    either) and counted as ``adam_missing_grad``.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if groups is not None and params.group_of(name) not in groups:
            continue
        if p.grad is None:
            diagnostics.warn("adam_missing_grad", name)
            continue
        lr = state.lr(params.group_of(name), epoch)
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * update
        p.grad = None
