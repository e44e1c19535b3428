"""AdamW, warmup + cosine learning-rate schedule, global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Learning rate for update number ``step``.

    Update numbers are 1-based: the first optimizer step uses ``lr_at(1)``,
    which is ``base_lr / warmup``; ``lr_at(0)`` is 0.  Warmup is linear up to
    ``base_lr`` at ``step == warmup``, then a cosine decays to exactly 0 at
    ``step == total``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """First/second moment buffers keyed by parameter name, plus the update counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def state_dict(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array(self.step, dtype=np.int64)}
        for name in self.m:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], prefix: str = "optim.") -> "OptimState":
        st = cls(step=int(state[f"{prefix}step"]))
        for key, arr in state.items():
            if key.startswith(f"{prefix}m."):
                st.m[key[len(prefix) + 2:]] = np.array(arr)
            elif key.startswith(f"{prefix}v."):
                st.v[key[len(prefix) + 2:]] = np.array(arr)
        return st


def global_grad_norm(params: list[tuple[str, Tensor]]) -> float:
    sq = 0.0
    for _, p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    return math.sqrt(sq)


def clip_grad_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Rescale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adamw_step(params: list[tuple[str, Tensor]], state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.98, eps: float = 1e-8, weight_decay: float = 0.0,
               decay_filter=None) -> None:
    """One AdamW update in place.

    Decay is decoupled: ``p -= lr * wd * p`` is applied before the Adam step and
    never enters the moments. ``decay_filter(name, tensor)`` selects decayed
    parameters (all by default).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        data = p.data
        if weight_decay and (decay_filter is None or decay_filter(name, p)):
            data = data - lr * weight_decay * data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
