from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; moments live on the parameters themselves."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name or 'parameter'}")
            p.step += 1
            p.m *= self.beta1
            p.m += (1 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1 - self.beta2) * g * g
            mhat = p.m / (1 - self.beta1 ** p.step)
            vhat = p.v / (1 - self.beta2 ** p.step)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    Adam(params, lr, (beta1, beta2), eps).step()
