"""Fine-tuning a velocity model against binary stability feedback.

Three objectives over LoRA parameters only:

* ``dro``: signed denoising loss, (2o - 1) * ||v_hat - v||^2. Stable samples are
  denoised better, unstable ones worse. No reference model, no pairs.
* ``dpo``: contrastive loss on (stable, unstable) pairs from the same prompt,
  measured relative to the frozen base model.
* ``sft``: plain velocity matching on the stable samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import seeding
from .checkpoint import ModelCheckpoint
from .datagen import RolloutRecord, group_by_prompt
from .errors import InputError, NumericError
from .flow import draw_noise, fm_loss, logit_normal, sq_error
from .nn import LoraAdapter, MlpModel
from .optim import AdamWConfig, AdamWState, adamw_step, clip_by_global_norm
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

OBJECTIVES = ("dro", "dpo", "sft")


@dataclass(frozen=True)
class RewardSample:
    prompt_id: str
    x0: np.ndarray
    cond: np.ndarray
    o: int
    tilt_deg: float | None = None

    def __post_init__(self):
        if self.o not in (0, 1):
            raise InputError(f"label must be 0 or 1, got {self.o!r}")


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: str
    x_w: np.ndarray
    x_l: np.ndarray
    cond: np.ndarray


def reward_samples(records: list[RolloutRecord]) -> list[RewardSample]:
    """Labelled, valid rollouts as training samples (invalid or unlabelled ones are dropped)."""
    return [RewardSample(r.prompt_id, np.asarray(r.latent), np.asarray(r.cond), int(r.o), r.tilt_deg)
            for r in records if r.valid and r.o is not None]


def _stack(samples: list[RewardSample]):
    if not samples:
        raise InputError("empty batch")
    x0 = np.stack([s.x0 for s in samples])
    cond = np.stack([s.cond for s in samples])
    o = np.array([s.o for s in samples], dtype=np.float64)
    return x0, cond, o


def _finite(loss: Tensor, name: str) -> Tensor:
    if not np.isfinite(loss.data):
        raise NumericError(f"{name} loss is not finite")
    return loss


def dro_loss(model: MlpModel, adapter: LoraAdapter | None, x0, cond, o, seed: int) -> Tensor:
    """Batch mean of (2o - 1) * ||v_hat - v||^2 with a fresh (t, eps) per element."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    if len(x0) == 0 or len(cond) != len(x0) or len(o) != len(x0):
        raise InputError("dro_loss needs matching nonempty x0, cond and labels")
    if not np.all((o == 0.0) | (o == 1.0)):
        raise InputError("labels must be 0 or 1")
    t, eps, _ = draw_noise(seed, len(x0), x0.shape[1])
    return dro_loss_at(model, adapter, x0, cond, o, t, eps)


def dro_loss_at(model: MlpModel, adapter: LoraAdapter | None, x0, cond, o, t, eps) -> Tensor:
    """dro_loss with the per-element (t, eps) given explicitly."""
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    err = sq_error(model, adapter, x0, cond, t, eps)
    return _finite((err * (2.0 * o - 1.0)).mean(), "DRO")


def sft_loss(model: MlpModel, adapter: LoraAdapter | None, x0, cond, seed: int) -> Tensor:
    """Velocity matching on stable samples; the same computation as ``fm_loss``."""
    return fm_loss(model, adapter, x0, cond, seed)


def stable_subset(samples: list[RewardSample]) -> list[RewardSample]:
    out = [s for s in samples if s.o == 1]
    if not out:
        raise InputError("no stable samples")
    return out


def dpo_loss(model: MlpModel, adapter: LoraAdapter | None, ref_model: MlpModel, x_w, x_l, cond,
             beta: float, seed: int) -> Tensor:
    """Mean of -log sigmoid(-beta * [(err_w - ref_w) - (err_l - ref_l)]).

    Winner and loser share t but get independent noise. The reference runs
    without any adapter and never receives gradients.
    """
    if not beta > 0:
        raise InputError("beta must be positive")
    x_w = np.atleast_2d(np.asarray(x_w, dtype=np.float64))
    x_l = np.atleast_2d(np.asarray(x_l, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if len(x_w) == 0 or x_w.shape != x_l.shape or len(cond) != len(x_w):
        raise InputError("dpo_loss needs matching nonempty winner, loser and cond batches")
    n, dim = x_w.shape
    rng = seeding.generator(seed)
    t = logit_normal(rng, n)
    eps_w = seeding.normal(rng, (n, dim))
    eps_l = seeding.normal(rng, (n, dim))
    with no_grad():
        ref_w = sq_error(ref_model, None, x_w, cond, t, eps_w).data
        ref_l = sq_error(ref_model, None, x_l, cond, t, eps_l).data
    err_w = sq_error(model, adapter, x_w, cond, t, eps_w)
    err_l = sq_error(model, adapter, x_l, cond, t, eps_l)
    margin = (err_w - ref_w) - (err_l - ref_l)
    return _finite(-((margin * -beta).log_sigmoid()).mean(), "DPO")


def pairable_prompts(samples: list[RewardSample]) -> tuple[list[str], list[str]]:
    """Prompt ids with both classes present, and those skipped."""
    groups = group_by_prompt(samples)
    ok, skipped = [], []
    for pid in sorted(groups):
        labels = {s.o for s in groups[pid]}
        (ok if labels == {0, 1} else skipped).append(pid)
    return ok, skipped


def make_pairs(samples: list[RewardSample], seed: int, epoch: int = 0) -> list[PreferencePair]:
    """Disjoint (stable, unstable) pairs per prompt, drawn without replacement.

    A prompt with a stable and b unstable rollouts yields min(a, b) pairs.
    """
    groups = group_by_prompt(samples)
    ok, skipped = pairable_prompts(samples)
    if not ok:
        raise InputError("no prompt has both a stable and an unstable rollout")
    if skipped:
        log.info("make_pairs: %d of %d prompts skipped", len(skipped), len(groups))
    rng = seeding.generator(seeding.derive_seed(seed, f"pairs/{epoch}"))
    pairs = []
    for pid in ok:
        win = [s for s in groups[pid] if s.o == 1]
        lose = [s for s in groups[pid] if s.o == 0]
        wi, li = rng.permutation(len(win)), rng.permutation(len(lose))
        for a, b in zip(wi, li):
            pairs.append(PreferencePair(pid, win[a].x0, lose[b].x0, win[a].cond))
    return pairs


@dataclass
class DsoConfig:
    objective: str = "dro"
    beta: float = 500.0
    weighting: str = "constant"
    steps: int = 4000
    batch_size: int = 48
    lr: float = 5e-6
    warmup_steps: int = 2000
    weight_decay: float = 0.01
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0
    clip: float = 1.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InputError(f"objective must be one of {OBJECTIVES}")
        if self.weighting != "constant":
            raise InputError("only constant time weighting is supported")
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if self.objective == "dpo" and not self.beta > 0:
            raise InputError("beta must be positive for DPO")
        if self.batch_size < 1 or self.lora_rank < 1 or self.clip <= 0:
            raise InputError("batch size, LoRA rank and clip norm must be positive")


@dataclass
class FinetuneResult:
    checkpoint: ModelCheckpoint
    log: list[dict]
    diverged: bool = False
    stopped_early: bool = False
    snapshots: dict[int, ModelCheckpoint] = field(default_factory=dict)


class _PromptSampler:
    """Batches drawn prompt-uniformly: pick a prompt, then one of its items."""

    def __init__(self, items, seed: int):
        self.groups = group_by_prompt(items)
        self.ids = sorted(self.groups)
        self.rng = seeding.generator(seed)

    def draw(self, n: int):
        p = self.rng.integers(0, len(self.ids), n)
        out = []
        for i in p:
            g = self.groups[self.ids[i]]
            out.append(g[int(self.rng.integers(0, len(g)))])
        return out


class _PairStream:
    """Walks through shuffled epochs of fresh pairings."""

    def __init__(self, samples, seed: int):
        self.samples, self.seed = samples, seed
        self.epoch = -1
        self.queue: list[PreferencePair] = []

    def draw(self, n: int) -> list[PreferencePair]:
        out = []
        while len(out) < n:
            if not self.queue:
                self.epoch += 1
                pairs = make_pairs(self.samples, self.seed, self.epoch)
                order = seeding.generator(seeding.derive_seed(self.seed, f"pairs/order/{self.epoch}"))
                self.queue = [pairs[i] for i in order.permutation(len(pairs))]
            out.append(self.queue.pop())
        return out


def _snapshot(model: MlpModel, adapter: LoraAdapter, cfg: DsoConfig, step: int, base_meta: dict) -> ModelCheckpoint:
    a = LoraAdapter(adapter.rank, adapter.alpha, [Tensor(x.data.copy()) for x in adapter.A],
                    [Tensor(x.data.copy()) for x in adapter.B])
    meta = dict(base_meta, objective=cfg.objective, finetune_steps=step)
    return ModelCheckpoint(model, a, cfg.seed, meta)


def finetune(base: ModelCheckpoint, samples: list[RewardSample], cfg: DsoConfig,
             snapshot_steps=(), early_stop: Callable[[int, ModelCheckpoint], bool] | None = None,
             hook_every: int = 0) -> FinetuneResult:
    """Train a fresh LoRA adapter on top of the frozen base model.

    ``early_stop(step, checkpoint)`` is called every ``hook_every`` steps and may
    return True to end training. A non-finite loss ends training and returns
    the last good adapter with ``diverged`` set.
    """
    if base.adapter is not None:
        raise InputError("base checkpoint already carries an adapter")
    if not samples:
        raise InputError("empty fine-tuning dataset")
    model = base.model
    model.set_trainable(False)
    adapter = LoraAdapter.init(model, cfg.lora_rank, cfg.lora_alpha,
                               seed=seeding.derive_seed(cfg.seed, "finetune/lora"))
    params = adapter.parameters()
    state = AdamWState.for_params(params, AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                                                      warmup_steps=cfg.warmup_steps))
    batch_seed = seeding.derive_seed(cfg.seed, "finetune/batches")
    if cfg.objective == "dpo":
        make_pairs(samples, batch_seed)  # fail early when nothing is pairable
        stream = _PairStream(samples, batch_seed)
    else:
        pool = stable_subset(samples) if cfg.objective == "sft" else samples
        stream = _PromptSampler(pool, batch_seed)

    records: list[dict] = []
    snapshots = {}
    wanted = set(int(s) for s in snapshot_steps)
    if 0 in wanted:
        snapshots[0] = _snapshot(model, adapter, cfg, 0, base.meta)
    diverged = stopped = False
    for step in range(1, cfg.steps + 1):
        noise_seed = seeding.derive_seed(cfg.seed, f"finetune/noise/{step}")
        backup = [p.data.copy() for p in params]
        try:
            if cfg.objective == "dpo":
                batch = stream.draw(cfg.batch_size)
                loss = dpo_loss(model, adapter, model, np.stack([b.x_w for b in batch]),
                                np.stack([b.x_l for b in batch]), np.stack([b.cond for b in batch]),
                                cfg.beta, noise_seed)
            else:
                x0, cond, o = _stack(stream.draw(cfg.batch_size))
                if cfg.objective == "dro":
                    loss = dro_loss(model, adapter, x0, cond, o, noise_seed)
                else:
                    loss = sft_loss(model, adapter, x0, cond, noise_seed)
            loss.backward()
            grads, norm = clip_by_global_norm([p.grad for p in params], cfg.clip)
            lr = adamw_step([p.data for p in params], grads, state)
            if not all(np.all(np.isfinite(p.data)) for p in params):
                raise NumericError("adapter weights became non-finite")
        except NumericError as exc:
            for p, b in zip(params, backup):
                p.data[...] = b
            log.warning("finetune diverged at step %d: %s", step, exc)
            diverged = True
            break
        records.append({"step": step, "loss": loss.item(), "grad_norm": norm, "lr": lr})
        if step in wanted:
            snapshots[step] = _snapshot(model, adapter, cfg, step, base.meta)
        if early_stop is not None and hook_every and step % hook_every == 0:
            if early_stop(step, _snapshot(model, adapter, cfg, step, base.meta)):
                stopped = True
                break
    final = _snapshot(model, adapter, cfg, len(records), base.meta)
    for p in params:
        p.requires_grad = False
    return FinetuneResult(final, records, diverged, stopped, snapshots)


# ---------------------------------------------------------------------------
# numerical checks of the algebra that turns the KL-regularised objective
# into per-sample denoising losses


@dataclass
class IdentityReport:
    checks: dict[str, float]
    trials: int
    tol: float = 1e-8

    @property
    def max_discrepancy(self) -> float:
        return max(self.checks.values())

    @property
    def passed(self) -> bool:
        return self.max_discrepancy < self.tol

    def lines(self) -> list[str]:
        out = [f"{name}: max |lhs - rhs| = {err:.3e}" for name, err in self.checks.items()]
        out.append(f"max discrepancy {self.max_discrepancy:.3e} over {self.trials} trials: "
                   + ("ok" if self.passed else "VIOLATED"))
        return out


def _gauss_logpdf(x, mu, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def _kl_by_quadrature(mu_q, var_q, mu_p, var_p, nodes=40) -> float:
    # E_q[log q - log p] with Gauss-Hermite nodes; exact for the quadratic integrand
    z, w = np.polynomial.hermite.hermgauss(nodes)
    x = mu_q + np.sqrt(2.0 * var_q) * z
    f = _gauss_logpdf(x, mu_q, var_q) - _gauss_logpdf(x, mu_p, var_p)
    return float(np.sum(w * f) / np.sqrt(np.pi))


def _kl_gauss(mu_q, var_q, mu_p, var_p) -> float:
    return 0.5 * (np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0)


def verify_derivation_identities(trials: int = 100, seed: int = 0) -> IdentityReport:
    """Check the closed-form steps on random scalar Gaussian instances.

    * kl_vs_eps_mse: for one reverse step of a Gaussian diffusion, the KL
      difference KL(q || p_theta) - KL(q || p_ref), evaluated by quadrature,
      equals c_t * (|eps - eps_theta|^2 - |eps - eps_ref|^2).
    * kl_closed_form: quadrature KL agrees with the analytic Gaussian KL.
    * eps_vs_velocity: on the straight path x_t = (1-t) x0 + t eps, the noise
      error equals (1-t)^2 times the velocity error.
    * gibbs_optimum: p* = p_ref exp(O/beta) / Z satisfies
      O = beta log Z + beta log(p*/p_ref) and attains beta log Z.
    * bradley_terry_z: -log sigmoid(r_w - r_l) does not depend on log Z.
    * sigmoid_log_algebra: -log sigmoid(x) = log(1 + exp(-x)), and equals ln 2 at x = 0.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    rng = seeding.generator(seeding.derive_seed(seed, "verify-derivations"))
    errs = {k: 0.0 for k in ("kl_vs_eps_mse", "kl_closed_form", "eps_vs_velocity", "gibbs_optimum",
                             "bradley_terry_z", "sigmoid_log_algebra")}

    def bump(key, value):
        errs[key] = max(errs[key], float(abs(value)))

    for _ in range(trials):
        abar_prev = rng.uniform(0.3, 0.99)
        alpha = rng.uniform(0.8, 0.999)
        abar = alpha * abar_prev
        beta_t = 1.0 - alpha
        x0, eps = rng.normal(size=2)
        e_theta, e_ref = eps + rng.normal(scale=0.5, size=2)
        xt = math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
        var = (1.0 - abar_prev) / (1.0 - abar) * beta_t
        mu_q = (math.sqrt(abar_prev) * beta_t / (1.0 - abar) * x0
                + math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar) * xt)

        def mean_from_eps(e):
            return (xt - beta_t / math.sqrt(1.0 - abar) * e) / math.sqrt(alpha)

        kl_theta = _kl_by_quadrature(mu_q, var, mean_from_eps(e_theta), var)
        kl_ref = _kl_by_quadrature(mu_q, var, mean_from_eps(e_ref), var)
        c_t = beta_t ** 2 / (2.0 * var * alpha * (1.0 - abar))
        bump("kl_vs_eps_mse", (kl_theta - kl_ref) - c_t * ((eps - e_theta) ** 2 - (eps - e_ref) ** 2))
        var_p = var * rng.uniform(0.5, 2.0)
        bump("kl_closed_form", _kl_by_quadrature(mu_q, var, mean_from_eps(e_theta), var_p)
             - _kl_gauss(mu_q, var, mean_from_eps(e_theta), var_p))

        t = rng.uniform(0.0, 1.0)
        v_hat = (eps - x0) + rng.normal()
        x_t = (1.0 - t) * x0 + t * eps
        eps_hat = x_t + (1.0 - t) * v_hat
        bump("eps_vs_velocity", (eps - eps_hat) ** 2 - (1.0 - t) ** 2 * ((eps - x0) - v_hat) ** 2)

        n = 8
        p_ref = rng.dirichlet(np.ones(n))
        reward = rng.uniform(0.0, 1.0, n)
        b = rng.uniform(0.2, 2.0)
        z = float(np.sum(p_ref * np.exp(reward / b)))
        p_star = p_ref * np.exp(reward / b) / z
        bump("gibbs_optimum", np.max(np.abs(reward - (b * math.log(z) + b * np.log(p_star / p_ref)))))
        value = float(np.sum(p_star * reward) - b * np.sum(p_star * np.log(p_star / p_ref)))
        bump("gibbs_optimum", value - b * math.log(z))

        i, j = rng.choice(n, 2, replace=False)
        r_w = b * math.log(p_star[i] / p_ref[i]) + b * math.log(z)
        r_l = b * math.log(p_star[j] / p_ref[j]) + b * math.log(z)
        with_z = -Tensor(np.array(r_w - r_l)).log_sigmoid().item()
        without_z = -Tensor(np.array(b * (math.log(p_star[i] / p_ref[i]) - math.log(p_star[j] / p_ref[j])))
                            ).log_sigmoid().item()
        bump("bradley_terry_z", with_z - without_z)

        x = rng.uniform(-20.0, 20.0)
        bump("sigmoid_log_algebra", -Tensor(np.array(x)).log_sigmoid().item() - math.log1p(math.exp(-x)))
    bump("sigmoid_log_algebra", -Tensor(np.array(0.0)).log_sigmoid().item() - math.log(2.0))
    return IdentityReport(errs, trials)
