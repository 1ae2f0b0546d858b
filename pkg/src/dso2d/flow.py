"""Rectified flow: linear corruption, velocity matching, Euler sampling, base-model pretraining.

Path convention: x_t = (1 - t) x0 + t eps, velocity target v = eps - x0,
so t = 0 is data and t = 1 is noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import InputError, NumericError
from .nn import LoraAdapter, MlpModel, forward
from .optim import AdamWConfig, AdamWState, adamw_step, clip_by_global_norm
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceConfig:
    drop_prob: float = 0.1
    scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise InputError("drop probability must lie in [0, 1)")
        if self.scale < 0:
            raise InputError("guidance scale must be non-negative")


def corrupt(x0, t, eps) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InputError("x0 and eps must have the same shape")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * eps


def logit_normal(rng: np.random.Generator, n: int, mu: float = 1.0, sigma: float = 1.0) -> np.ndarray:
    z = mu + sigma * seeding.normal(rng, n)
    return 1.0 / (1.0 + np.exp(-z))


def sample_time(n: int, seed: int) -> np.ndarray:
    """n i.i.d. LogitNormal(1, 1) times in (0, 1)."""
    if n < 1:
        raise InputError("n must be >= 1")
    return logit_normal(seeding.generator(seed), n)


def draw_noise(seed: int, n: int, dim: int, drop_prob: float = 0.0):
    """Per-element (t, eps, keep-cond mask) for a batch of size n."""
    rng = seeding.generator(seed)
    t = logit_normal(rng, n)
    eps = seeding.normal(rng, (n, dim))
    keep = rng.random(n) >= drop_prob
    return t, eps, keep


def sq_error(model: MlpModel, adapter: LoraAdapter | None, x0, cond, t, eps) -> Tensor:
    """Per-element ||v_hat(x_t, t, cond) - (eps - x0)||^2, shape (n,)."""
    xt = corrupt(x0, t, eps)
    pred = forward(model, adapter, xt, cond, t)
    return (pred - (eps - x0)).square().sum(axis=1)


def _batch(x0, cond):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if len(x0) == 0:
        raise InputError("empty batch")
    if len(cond) != len(x0):
        raise InputError("x0 and cond batch sizes differ")
    return x0, cond


def fm_loss(model: MlpModel, adapter: LoraAdapter | None, x0, cond, seed: int,
            drop_prob: float = 0.0) -> Tensor:
    """Batch mean of the velocity-matching error with constant time weighting."""
    x0, cond = _batch(x0, cond)
    t, eps, keep = draw_noise(seed, len(x0), x0.shape[1], drop_prob)
    cond = cond * keep[:, None]
    loss = sq_error(model, adapter, x0, cond, t, eps).mean()
    if not np.isfinite(loss.data):
        raise NumericError("flow-matching loss is not finite")
    return loss


def velocity(model: MlpModel, adapter: LoraAdapter | None, x, cond, t) -> np.ndarray:
    with no_grad():
        return forward(model, adapter, x, cond, t).data


def sample_batch(model: MlpModel, adapter: LoraAdapter | None, conds, seeds, steps: int = 12,
                 guidance: GuidanceConfig = GuidanceConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Euler-integrate from t=1 to t=0; each row starts from noise drawn with its own seed.

    Returns latents (n, D) and a validity mask (False where anything went non-finite).
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    x = np.stack([seeding.normal(seeding.generator(s), model.latent_dim) for s in seeds])
    uncond = np.zeros_like(conds)
    dt = 1.0 / steps
    with np.errstate(all="ignore"):
        for i in range(steps):
            t = 1.0 - i * dt
            v = velocity(model, adapter, x, conds, t)
            if guidance.scale != 1.0:
                vu = velocity(model, adapter, x, uncond, t)
                v = vu + guidance.scale * (v - vu)
            x = x - dt * v
    valid = np.isfinite(x).all(axis=1)
    return x, valid


def sample(model: MlpModel, adapter: LoraAdapter | None, cond, steps: int = 12,
           guidance: GuidanceConfig = GuidanceConfig(), seed: int = 0) -> tuple[np.ndarray, bool]:
    x, valid = sample_batch(model, adapter, np.atleast_2d(cond), [seed], steps, guidance)
    return x[0], bool(valid[0])


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 48
    lr: float = 1e-3
    warmup_steps: int = 500
    weight_decay: float = 0.0
    clip: float = 1.0
    drop_prob: float = 0.1
    hidden: tuple = (128, 128, 128)
    time_dim: int = 32
    seed: int = 0


def pretrain(x0, cond, cfg: PretrainConfig, model: MlpModel | None = None):
    """Train a base velocity model on (x0, cond) pairs; returns (model, log records)."""
    x0, cond = _batch(x0, cond)
    if model is None:
        model = MlpModel.init(x0.shape[1], cond.shape[1], cfg.hidden, cfg.time_dim,
                              seed=seeding.derive_seed(cfg.seed, "pretrain/init"))
    model.set_trainable(True)
    params = model.parameters()
    state = AdamWState.for_params(params, AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                                                      warmup_steps=cfg.warmup_steps))
    rng = seeding.generator(seeding.derive_seed(cfg.seed, "pretrain/batches"))
    records = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(x0), cfg.batch_size)
        loss = fm_loss(model, None, x0[idx], cond[idx],
                       seeding.derive_seed(cfg.seed, f"pretrain/noise/{step}"), cfg.drop_prob)
        loss.backward()
        grads, norm = clip_by_global_norm([p.grad for p in params], cfg.clip)
        lr = adamw_step([p.data for p in params], grads, state)
        records.append({"step": step, "loss": loss.item(), "grad_norm": norm, "lr": lr})
        if step % 2000 == 0:
            log.info("pretrain step %d loss %.4f", step, np.mean([r["loss"] for r in records[-2000:]]))
    model.set_trainable(False)
    return model, records
