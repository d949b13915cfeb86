"""SGD with momentum and either coupled weight decay or an l1 penalty.

Both rules keep a velocity per parameter::

    weight decay:  v <- mu*v - lr*grad - lam*lr*p
    l1:            v <- mu*v - lr*grad - lam*lr*sign(p)
    then           p <- p + v

``sign(0)`` is 0, so a parameter sitting exactly at the origin gets no l1 push.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

REGULARIZERS = ("weight_decay", "l1", "none")


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    strength: float = 1e-4
    mode: str = "weight_decay"
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in REGULARIZERS:
            raise ValueError(f"unknown regularization mode {self.mode!r}; expected one of {REGULARIZERS}")


def _prepare(p, grad, state: SgdState, name: str):
    p = np.asarray(p, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if p.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameter {name!r} shape {p.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(grad))):
        raise FloatingPointError(f"non-finite value in parameter {name!r} or its gradient")
    v = state.velocity.get(name)
    if v is None:
        v = np.zeros_like(p)
    elif v.shape != p.shape:
        raise ShapeError(f"velocity shape {v.shape} does not match parameter {name!r} shape {p.shape}")
    return p, grad, v


def _apply(p, grad, v, penalty, state: SgdState, name: str):
    v = state.momentum * v - state.lr * grad - state.strength * state.lr * penalty
    state.velocity[name] = v
    return p + v, state


def sgd_step_weight_decay(p, grad, state: SgdState, name: str = "param"):
    p, grad, v = _prepare(p, grad, state, name)
    return _apply(p, grad, v, p, state, name)


def sgd_step_l1(p, grad, state: SgdState, name: str = "param"):
    p, grad, v = _prepare(p, grad, state, name)
    return _apply(p, grad, v, np.sign(p), state, name)


def sgd_step(p, grad, state: SgdState, name: str = "param"):
    """Dispatch on ``state.mode``; ``"none"`` is plain momentum SGD."""
    if state.mode == "weight_decay":
        return sgd_step_weight_decay(p, grad, state, name)
    if state.mode == "l1":
        return sgd_step_l1(p, grad, state, name)
    p, grad, v = _prepare(p, grad, state, name)
    return _apply(p, grad, v, 0.0, state, name)
