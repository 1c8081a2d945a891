"""Adam optimizer with bias correction, operating on parameter arrays in place."""

from __future__ import annotations

import numpy as np


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update for a single tensor; `t` is the 1-based step count.

    `param`, `m` and `v` are modified in place.
    """
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError("param/grad/state shape mismatch")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Drives `adam_step` over a fixed, ordered parameter list.

    The parameter arrays are shared with the layers and updated in place;
    moment buffers live here and are part of the checkpoint payload.
    """

    def __init__(self, params: list[tuple[str, np.ndarray]], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.names = [name for name, _ in params]
        self.params = [p for _, p in params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            adam_step(p, g, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers and step count keyed for checkpointing."""
        out: dict[str, np.ndarray] = {"adam.t": np.array(self.t, dtype=np.int64)}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"])
        for i, name in enumerate(self.names):
            self.m[i] = arrays[f"adam.m.{name}"].copy()
            self.v[i] = arrays[f"adam.v.{name}"].copy()
