"""Adam optimizer over a flat list of parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias-corrected moments.

    ``step`` updates the parameter arrays in place.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr=None):
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter list does not match optimizer state")
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def adam_step(state, params, grads, lr):
    """Functional form: returns ``(params, state)`` after one update."""
    return state.step(params, grads, lr), state
