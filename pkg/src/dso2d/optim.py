"""AdamW with decoupled weight decay, linear warmup and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError


@dataclass
class AdamWConfig:
    lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 2000


@dataclass
class AdamWState:
    config: AdamWConfig
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params, config: AdamWConfig | None = None) -> "AdamWState":
        params = [np.asarray(getattr(p, "data", p)) for p in params]
        return cls(config or AdamWConfig(), [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def warmup_lr(config: AdamWConfig, step: int) -> float:
    if config.warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState) -> float:
    """Update ``params`` in place and advance ``state``; returns the lr used.

    A non-finite gradient raises NumericError before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputError("params, grads and optimizer state must have equal length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InputError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient; step {state.step + 1} skipped")
    cfg = state.config
    step = state.step + 1
    lr = warmup_lr(cfg, step)
    if lr < 0:
        raise InputError("learning rate must be non-negative")
    bc1 = 1.0 - cfg.beta1 ** step
    bc2 = 1.0 - cfg.beta2 ** step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    state.step = step
    return lr


def global_norm(grads: list[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return [g * scale for g in grads], norm
