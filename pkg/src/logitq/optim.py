"""Bias-corrected Adam over graph leaves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter Adam moments; ``step`` increases by 1 per update."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter values."""
    if param.shape != grad.shape:
        raise ContractError(f"adam_step: param {param.shape} vs grad {grad.shape}")
    if state.lr < 0:
        raise ContractError("adam_step: negative learning rate")
    if state.m is None:
        state.m = np.zeros_like(param, dtype=np.float32)
        state.v = np.zeros_like(param, dtype=np.float32)
    state.step += 1
    g = grad.astype(np.float32, copy=False)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    return (param - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)


class Adam:
    """Adam over a fixed list of trainable tensors."""

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if any(not p.requires_grad for p in params):
            raise ContractError("Adam: all params must require grad")
        self.params = params
        self.states = [AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for _ in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Update every parameter that received a gradient."""
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue
            p.data = adam_step(s, p.data, p.grad)
