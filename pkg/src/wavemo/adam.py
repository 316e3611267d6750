"""Minimal Adam optimizer over a dict of numpy parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; ``step`` updates the arrays in ``params`` in place.

    Complex arrays are treated as independent real and imaginary
    coordinates (gradients follow the ``dL/dRe + j dL/dIm`` convention).
    ``lr`` may be a float or a dict keyed by parameter name.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _moments(self, name, g):
        if np.iscomplexobj(g):
            g = np.stack([g.real, g.imag])
        if name not in self.m:
            self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        return m, v

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], maximize=False):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self._moments(name, -g if maximize else g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if np.iscomplexobj(params[name]):
                upd = upd[0] + 1j * upd[1]
            lr = self.lr[name] if isinstance(self.lr, dict) else self.lr
            params[name] -= lr * upd
