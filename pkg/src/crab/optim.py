"""AdamW with per-group learning rates, a single-cycle cosine schedule, and
gradient-accumulation helpers. Decay is decoupled from the gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .model import GROUP_ENCODER, GROUP_MAIN
from .tensor import Tensor


@dataclass
class OptimConfig:
    lr_main: float = 1e-5
    lr_encoder: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    grad_accum: int = 4
    eta_min: float = 0.0

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_encoder <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.eta_min < 0:
            raise ConfigError("eta_min must be non-negative")

    def group_lrs(self) -> dict[str, float]:
        return {GROUP_MAIN: self.lr_main, GROUP_ENCODER: self.lr_encoder}


def cosine_lr(base_lr: float, t: int, total_steps: int, eta_min: float = 0.0) -> float:
    """Single-cycle cosine anneal from base_lr (t=0) down to eta_min (t=T)."""
    if total_steps == 0:
        raise ContractError("cosine schedule needs at least one step")
    if not 0 <= t <= total_steps:
        raise ContractError(f"step {t} outside [0, {total_steps}]")
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


NamedParam = tuple[str, Tensor, str]  # (name, tensor, group tag)


def adamw_step(
    named_params: Sequence[NamedParam],
    state: AdamState,
    group_lrs: dict[str, float],
    cfg: OptimConfig,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr_group * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, tensor, group in named_params:
        if tensor.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        g = tensor.grad
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        if group not in group_lrs:
            raise ConfigError(f"no learning rate for group {group}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        lr = group_lrs[group]
        tensor.data = tensor.data - lr * (
            m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * tensor.data
        )


def zero_gradients(named_params: Sequence[NamedParam], fill: bool = False) -> None:
    """Clear gradients; with ``fill`` set them to zero arrays instead of None,
    so every parameter takes an optimizer step even if a branch got no signal."""
    for _, tensor, _ in named_params:
        tensor.grad = np.zeros_like(tensor.data) if fill else None


def scale_gradients(named_params: Sequence[NamedParam], factor: float) -> None:
    """Rescale accumulated gradients (1/n before stepping on n micro-batches)."""
    for name, tensor, _ in named_params:
        if tensor.grad is None:
            raise ContractError(f"parameter {name} has no gradient to scale")
        tensor.grad = tensor.grad * factor
