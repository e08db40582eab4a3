from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction.

    ``lr`` may be a float or a callable ``name -> lr`` so different parameter
    groups (e.g. probe pixels) can use their own step size.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def _lr(self, name):
        return self.lr(name) if callable(self.lr) else self.lr

    def step(self, params, grads, names=None):
        """Update ``params`` in place using ``grads``; only ``names`` if given."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in (names if names is not None else grads):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self._lr(k) / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            params[k] -= update.astype(params[k].dtype, copy=False)
        return params

    def state_arrays(self):
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, t):
        self.m, self.v = {}, {}
        for k, a in arrays.items():
            kind, name = k.split("/", 1)
            (self.m if kind == "m" else self.v)[name] = np.array(a)
        self.t = int(t)
