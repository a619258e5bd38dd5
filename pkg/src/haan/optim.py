"""Adam with bias correction."""

import numpy as np


def adam_step(params, grads, state, lr, beta1, beta2, eps, t):
    """Apply one in-place Adam update.

    ``params`` is a sequence of ``(name, Tensor)``, ``grads`` maps name to
    ndarray (missing or ``None`` means no update), ``state`` maps name to a
    ``(m, v)`` pair of arrays updated in place. ``t`` is the 1-based step.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {n: (np.zeros_like(p.data), np.zeros_like(p.data)) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        grads = {n: p.grad for n, p in self.params}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t)
