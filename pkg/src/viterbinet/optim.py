"""Adam for dense arrays and for sparse per-arc updates."""

from __future__ import annotations

import numpy as np


class Adam:
    """Dense Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match the parameter list")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SparseAdam:
    """Lazy Adam over a 1-d parameter vector.

    Only entries present in a gradient are touched; each entry keeps its own
    moments and step count, allocated on first touch.
    """

    def __init__(self, param: np.ndarray, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.param = param
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[int, list[float]] = {}   # index -> [m, v, steps]
        self.t = 0

    def step(self, grad: dict[int, float]) -> None:
        self.t += 1
        if not grad:
            return
        idx = np.fromiter(grad.keys(), dtype=np.int64, count=len(grad))
        g = np.fromiter(grad.values(), dtype=np.float64, count=len(grad))
        st = np.array([self.state.get(int(k), (0.0, 0.0, 0)) for k in idx], dtype=np.float64).reshape(-1, 3)
        m = self.beta1 * st[:, 0] + (1.0 - self.beta1) * g
        v = self.beta2 * st[:, 1] + (1.0 - self.beta2) * g * g
        n = st[:, 2] + 1
        mhat = m / (1.0 - self.beta1 ** n)
        vhat = v / (1.0 - self.beta2 ** n)
        self.param[idx] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        for k, mk, vk, nk in zip(idx.tolist(), m.tolist(), v.tolist(), n.tolist()):
            self.state[k] = [mk, vk, int(nk)]


def adam_step(params: np.ndarray, grads: np.ndarray, state: dict | None = None, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, dict]:
    """Functional single Adam step; ``state`` holds ``m``, ``v`` and ``t``."""
    if state is None:
        state = {"m": np.zeros_like(params), "v": np.zeros_like(params), "t": 0}
    t = state["t"] + 1
    m = beta1 * state["m"] + (1.0 - beta1) * grads
    v = beta2 * state["v"] + (1.0 - beta2) * grads * grads
    new = params - lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    return new, {"m": m, "v": v, "t": t}
