"""Adam with bias correction over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam update; grads are cleared after each step.

    Parameters are a name -> Tensor mapping; the iteration order of that
    mapping fixes the update order, which keeps steps bit-reproducible.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- checkpoint plumbing -------------------------------------------------
    def state_entries(self) -> dict[str, np.ndarray]:
        """Moment buffers as named float arrays (for serialization)."""
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params.items():
            for prefix, store in (("adam.m.", self.m), ("adam.v.", self.v)):
                key = prefix + name
                if key not in entries:
                    raise KeyError(f"optimizer state missing entry {key!r}")
                arr = entries[key]
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"optimizer moment {key!r} has shape {arr.shape}, "
                        f"parameter expects {p.data.shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"optimizer moment {key!r} contains non-finite values")
                store[name] = arr.astype(p.data.dtype, copy=True)
        self.t = int(t)
