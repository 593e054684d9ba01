"""Rectified Adam with decoupled weight decay."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor


class RAdam:
    """RAdam (Liu et al., 2020).

    Weight decay is decoupled: each parameter is multiplied by
    ``1 - lr * weight_decay`` before the moment-based update. While the
    variance estimate is not yet tractable (rho_t <= 5) the update falls back to
    bias-corrected momentum SGD.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractViolation(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractViolation(f"betas must lie in [0, 1), got {betas}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.exp_avg_sq = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractViolation(f"no gradient for registered parameter(s): {', '.join(missing[:5])}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho_t = rho_inf - 2.0 * t * b2 ** t / bias2
        rectified = rho_t > 5.0
        if rectified:
            rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                             / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.data *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            m = self.exp_avg[k]
            v = self.exp_avg_sq[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if rectified:
                adaptive = math.sqrt(bias2) / (np.sqrt(v) + self.eps)
                p.data -= (self.lr * rect / bias1) * m * adaptive
            else:
                p.data -= (self.lr / bias1) * m

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict]:
        """Arrays (moments) and scalar state, for checkpointing."""
        arrays = {}
        for k in self.params:
            arrays[f"exp_avg/{k}"] = self.exp_avg[k]
            arrays[f"exp_avg_sq/{k}"] = self.exp_avg_sq[k]
        meta = {"step": self.step_count, "lr": self.lr, "betas": [self.beta1, self.beta2],
                "eps": self.eps, "weight_decay": self.weight_decay}
        return arrays, meta

    def load_state_dict(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        for k, p in self.params.items():
            for slot, store in (("exp_avg", self.exp_avg), ("exp_avg_sq", self.exp_avg_sq)):
                arr = arrays.get(f"{slot}/{k}")
                if arr is None or arr.shape != p.shape:
                    raise ContractViolation(f"optimizer state for {k!r} missing or misshapen")
                store[k] = np.array(arr, dtype=p.dtype)
        self.step_count = int(meta["step"])
