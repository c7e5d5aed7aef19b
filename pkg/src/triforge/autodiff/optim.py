"""Adam optimizer over autodiff leaf tensors."""

from __future__ import annotations

import numpy as np

from .tensor import AutodiffError


def adam_state(params):
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place. Deterministic given state; non-finite
    gradients raise."""
    state["step"] += 1
    t = state["step"]
    b1c = 1.0 - beta1 ** t
    b2c = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise AutodiffError("adam_step: non-finite gradient")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - (lr * (m / b1c) / (np.sqrt(v / b2c) + eps)).astype(
            np.float32
        )
    return params, state


class Adam:
    """Stateful wrapper reading `.grad` off each parameter."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = adam_state(self.params)

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(
            self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
