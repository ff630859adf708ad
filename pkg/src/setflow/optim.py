"""Adam optimizer over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters for one model."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns (new_params, state).

    Arrays are replaced, never mutated, so tensors recorded on a live tape
    keep their values. A non-finite gradient aborts before anything moves.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise OptimizerError(
                f"adam_step: grad shape {g.shape} != param shape "
                f"{params[name].shape} for {name!r}"
            )
        if not np.isfinite(g).all():
            raise OptimizerError(f"adam_step: non-finite gradient for {name!r}")
    state.step += 1
    new_params = {}
    for name, p in params.items():
        pn, mn, vn = kernels.adam_update(
            p.ravel(), grads[name].ravel().astype(np.float64),
            state.m[name].ravel(), state.v[name].ravel(),
            state.step, state.lr, state.beta1, state.beta2, state.eps,
        )
        new_params[name] = pn.reshape(p.shape)
        state.m[name] = mn.reshape(p.shape)
        state.v[name] = vn.reshape(p.shape)
    return new_params, state
