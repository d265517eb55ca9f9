"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from gemloc.diffcore.tensor import DiffcoreError, ShapeError, Tensor


class NonFiniteGradError(DiffcoreError):
    """A gradient contained NaN/Inf; the whole step was rejected."""


class Adam:
    """Bias-corrected Adam. Parameters with no gradient this step are left alone."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(f"adam: non-finite gradient for {name!r}; step rejected")
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers under stable names, for checkpointing."""
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"], dtype=np.float32)
            self.v[name] = np.array(arrays[f"adam.v.{name}"], dtype=np.float32)
        self.t = int(t)
