"""Adam with bias correction."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


class Adam:
    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractViolation(f"no gradient for parameters: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        # Folding both corrections into the step size keeps the update in place.
        step_size = self.lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
        eps_hat = self.eps * np.sqrt(1 - b2 ** t)
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (step_size * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        state["step"] = np.array([self.step_count], dtype=np.float64)
        return state

    def load_state_dict(self, state: dict) -> None:
        for k in self.params:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]
        self.step_count = int(np.asarray(state["step"]).reshape(-1)[0])


def adam_step(state: Adam) -> None:
    """Apply one update to every parameter tracked by ``state``."""
    state.step()
