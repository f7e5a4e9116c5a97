"""AdamW with decoupled weight decay, plus the warmup+cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from segprompt.errors import ContractError
from segprompt.nn.tensor import Tensor


@dataclass
class OptimState:
    """Per-parameter Adam moments keyed by parameter name."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """One AdamW update in place: p -= lr * (m_hat/(sqrt(v_hat)+eps) + wd*p)."""
    if lr < 0:
        raise ContractError("lr must be >= 0")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)


class AdamW:
    """Convenience wrapper over named parameters with a frozen-name filter.

    Gradients produced for frozen parameters are discarded: the parameters are
    never updated and their moments never accumulate.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, frozen_prefixes: tuple[str, ...] = ()):
        self.params = params
        self.frozen_prefixes = tuple(frozen_prefixes)
        self.state = OptimState(betas=betas, eps=eps, weight_decay=weight_decay)
        self._live = {name: p for name, p in params.items() if not self._is_frozen(name)}

    def _is_frozen(self, name: str) -> bool:
        return any(name == pre or name.startswith(pre + ".") for pre in self.frozen_prefixes)

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self._live.items() if p.grad is not None}
        adamw_step(self._live, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class LrSchedule:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps."""

    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ContractError("warmup_ratio must lie in [0, 1)")
        if self.total_steps <= 0:
            raise ContractError("total_steps must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}]")
    warmup = math.floor(schedule.warmup_ratio * schedule.total_steps)
    if step < warmup:
        return schedule.base_lr * step / warmup
    span = schedule.total_steps - warmup
    if span == 0:
        return 0.0
    progress = (step - warmup) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
