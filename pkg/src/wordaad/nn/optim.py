from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update, in place on ``params``; returns ``params``."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} does not match the parameter shape")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    return params


def max_norm_project(weights: np.ndarray, limit: float, axis=None) -> np.ndarray:
    """Rescale every unit whose weight norm exceeds ``limit`` back onto the ball.

    ``axis`` names the axes the norm runs over (all axes except the first by
    default, i.e. one unit per leading index). Works in place and returns the array.
    """
    if limit <= 0:
        raise ValueError("max-norm limit must be positive")
    if axis is None:
        axis = tuple(range(1, weights.ndim)) if weights.ndim > 1 else (0,)
    norms = np.sqrt((weights.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    scale = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    weights *= scale.astype(weights.dtype)
    return weights
