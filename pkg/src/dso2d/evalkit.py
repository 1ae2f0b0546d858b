"""Evaluation: stability and geometry metrics, sweeps, perturbation and flat-cut studies, loss curves."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import seeding
from .align import DsoConfig, finetune, reward_samples
from .checkpoint import ModelCheckpoint
from .datagen import PromptRecord, RolloutRecord, label, rollout, subset_fraction
from .errors import GeometryError, InputError
from .flow import GuidanceConfig
from .geometry import decode_shape, fscore, icp_align, normalize_unit_box, sample_boundary
from .parallel import pmap
from .physics import SimConfig, flat_cut, oracle, perturbation_sweep, settle
from .serialize import fmt_float
from .tensor import Tensor

log = logging.getLogger(__name__)

N_POINTS = 256
TAU = 0.05
REPORT_FIELDS = ("pct_output", "pct_stable", "mean_rot_deg", "mean_cd", "mean_fscore", "n_samples")


@dataclass
class EvalReport:
    pct_output: float
    pct_stable: float | None
    mean_rot_deg: float | None
    mean_cd: float | None
    mean_fscore: float | None
    n_samples: int
    seed: int
    model_hash: str = ""
    per_prompt: list[dict] = field(default_factory=list)
    per_sample: list[dict] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


def geometry_scores(poly, gt_poly, seed: int, n_points: int = N_POINTS, tau: float = TAU) -> tuple[float, float]:
    """(chamfer, F-score in [0, 100]) after unit-box normalisation and ICP of poly onto gt."""
    a = sample_boundary(normalize_unit_box(poly), n_points, seeding.derive_seed(seed, "points/sample"))
    b = sample_boundary(normalize_unit_box(gt_poly), n_points, seeding.derive_seed(seed, "points/gt"))
    tr, cd = icp_align(a, b)
    return cd, 100.0 * fscore(tr.apply(a), b, tau)


def _score_one(job):
    rec, gt, seed = job
    if not rec.valid:
        return None
    return geometry_scores(decode_shape(rec.latent), decode_shape(gt), seed)


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def report_from_rollouts(records: list[RolloutRecord], prompts: list[PromptRecord], seed: int,
                         model_hash: str = "", workers: int = 1) -> EvalReport:
    """Aggregate labelled rollouts against their prompts' ground truth."""
    by_id = {p.prompt_id: p for p in prompts}
    for r in records:
        if by_id[r.prompt_id].gt_latent is None:
            raise InputError(f"prompt {r.prompt_id} has no ground truth")
    jobs = [(r, by_id[r.prompt_id].gt_latent, seeding.derive_seed(seed, f"eval/{r.prompt_id}/{r.sample_index}"))
            for r in records]
    scores = pmap(_score_one, jobs, workers, chunksize=32)
    valid = [r.valid for r in records]
    n = len(records)
    if n == 0:
        raise InputError("no samples to evaluate")
    ok = [i for i in range(n) if valid[i]]
    per_prompt: dict[str, dict] = {}
    for r, sc in zip(records, scores):
        d = per_prompt.setdefault(r.prompt_id, {"prompt_id": r.prompt_id, "n": 0, "n_valid": 0, "n_stable": 0,
                                                "tilts": [], "cds": []})
        d["n"] += 1
        if r.valid:
            d["n_valid"] += 1
            d["n_stable"] += int(r.o)
            d["tilts"].append(r.tilt_deg)
            d["cds"].append(sc[0])
    samples = [{"prompt_id": r.prompt_id, "sample_index": r.sample_index, "valid": r.valid, "o": r.o,
                "tilt_deg": r.tilt_deg, "cd": sc[0] if sc else None, "fscore": sc[1] if sc else None}
               for r, sc in zip(records, scores)]
    rows = []
    for pid in sorted(per_prompt):
        d = per_prompt[pid]
        rows.append({"prompt_id": pid, "n": d["n"], "n_valid": d["n_valid"], "n_stable": d["n_stable"],
                     "mean_rot_deg": _mean(d["tilts"]), "mean_cd": _mean(d["cds"])})
    return EvalReport(
        pct_output=100.0 * len(ok) / n,
        pct_stable=100.0 * _mean([records[i].o for i in ok]) if ok else None,
        mean_rot_deg=_mean([records[i].tilt_deg for i in ok]),
        mean_cd=_mean([scores[i][0] for i in ok]),
        mean_fscore=_mean([scores[i][1] for i in ok]),
        n_samples=n, seed=seed, model_hash=model_hash, per_prompt=rows, per_sample=samples)


def eval_rollouts(ckpt: ModelCheckpoint, prompts: list[PromptRecord], samples_per_prompt: int = 1, seed: int = 0,
                  steps: int = 12, guidance: GuidanceConfig = GuidanceConfig(), sim_cfg: SimConfig = SimConfig(),
                  workers: int = 1) -> list[RolloutRecord]:
    """The labelled samples that ``evaluate`` scores."""
    if not prompts:
        raise InputError("no evaluation prompts")
    recs = rollout(ckpt.model, ckpt.adapter, prompts, samples_per_prompt, steps, guidance,
                   seeding.derive_seed(seed, "eval/rollout"), workers=workers)
    return label(recs, sim_cfg, workers)


def evaluate(ckpt: ModelCheckpoint, prompts: list[PromptRecord], samples_per_prompt: int = 1, seed: int = 0,
             steps: int = 12, guidance: GuidanceConfig = GuidanceConfig(), sim_cfg: SimConfig = SimConfig(),
             workers: int = 1) -> EvalReport:
    """Sample, simulate and score; a pure function of (checkpoint, prompts, seed)."""
    recs = eval_rollouts(ckpt, prompts, samples_per_prompt, seed, steps, guidance, sim_cfg, workers)
    return report_from_rollouts(recs, prompts, seed, ckpt.content_hash(), workers)


def correlation(cd, tilt) -> tuple[float, float]:
    """Pearson r and two-sided p-value."""
    cd, tilt = np.asarray(cd, dtype=np.float64), np.asarray(tilt, dtype=np.float64)
    if cd.shape != tilt.shape or cd.ndim != 1 or len(cd) < 3:
        raise InputError("need at least 3 paired points")
    if np.ptp(cd) == 0.0 or np.ptp(tilt) == 0.0:
        raise InputError("correlation undefined for a constant input")
    res = stats.pearsonr(cd, tilt)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# CSV helpers


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def to_csv(header, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in header])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# sweeps

SWEEP_HEADER = ("axis", "value", "pct_output", "pct_stable", "mean_rot_deg", "mean_cd", "mean_fscore",
                "n_samples", "model_hash", "status")


@dataclass
class SweepResult:
    axis: str
    points: list[tuple[float, EvalReport | None]]
    errors: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for value, rep in self.points:
            row = {"axis": self.axis, "value": value}
            if rep is None:
                row["status"] = "error: " + self.errors.get(value, "unknown")
            else:
                row.update(rep.row(), model_hash=rep.model_hash, status="ok")
            out.append(row)
        return out

    def to_csv(self) -> str:
        return to_csv(SWEEP_HEADER, self.rows())


def sweep(axis: str, values, base: ModelCheckpoint, records: list[RolloutRecord], cfg: DsoConfig,
          eval_prompts: list[PromptRecord], samples_per_prompt: int = 1, seed: int = 0,
          workers: int = 1) -> SweepResult:
    """Fine-tune and evaluate at each axis point with shared seeds.

    ``steps``: one run to the largest value, evaluated at each intermediate
    step (identical to separate runs since training is deterministic).
    ``data``: each value is a fraction of the prompts, nested by construction.
    """
    values = [float(v) if axis == "data" else int(v) for v in values]
    if len(values) < 2:
        raise InputError("a sweep needs at least 2 points")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise InputError("sweep values must be strictly increasing")
    points, errors = [], {}

    def run_eval(value, ckpt):
        try:
            points.append((value, evaluate(ckpt, eval_prompts, samples_per_prompt, seed, workers=workers)))
        except Exception as exc:  # keep partial results
            errors[value] = f"{type(exc).__name__}: {exc}"
            points.append((value, None))

    if axis == "steps":
        run_cfg = DsoConfig(**{**asdict(cfg), "steps": max(values)})
        res = finetune(base, reward_samples(records), run_cfg, snapshot_steps=values)
        for v in values:
            if v in res.snapshots:
                run_eval(v, res.snapshots[v])
            else:
                errors[v] = "training ended before this step"
                points.append((v, None))
    elif axis == "data":
        for v in values:
            try:
                sub = subset_fraction(records, v, seeding.derive_seed(cfg.seed, "sweep/data"))
                ckpt = finetune(base, reward_samples(sub), cfg).checkpoint
            except Exception as exc:
                errors[v] = f"{type(exc).__name__}: {exc}"
                points.append((v, None))
                continue
            run_eval(v, ckpt)
    else:
        raise InputError("axis must be 'steps' or 'data'")
    return SweepResult(axis, points, errors)


# ---------------------------------------------------------------------------
# robustness studies

PERTURB_THETAS = (0.01, 0.02, 0.04, 0.08)
CUT_HEIGHTS = (0.05, 0.1, 0.15, 0.2)


def _perturb_one(job):
    latent, theta, runs, seed = job
    return perturbation_sweep(decode_shape(latent), theta, runs, seed)


def perturbation_eval(latents, thetas=PERTURB_THETAS, runs: int = 100, seed: int = 0,
                      workers: int = 1) -> list[dict]:
    """Mean stability rate over shapes when the start pose is tilted by U(-theta, theta) radians."""
    thetas = [float(t) for t in thetas]
    if any(t <= 0 for t in thetas):
        raise InputError("theta_max must be positive")
    latents = [np.asarray(z) for z in latents]
    if not latents:
        raise InputError("no shapes to perturb")
    rows = []
    for theta in thetas:
        jobs = [(z, theta, runs, seeding.derive_seed(seed, f"perturb/{i}")) for i, z in enumerate(latents)]
        rates = pmap(_perturb_one, jobs, workers, chunksize=8)
        rows.append({"theta_max": theta, "stability_rate": float(np.mean(rates)), "n_shapes": len(latents),
                     "runs": runs})
    return rows


def _cut_one(job):
    rec, gt, z, seed, sim_cfg = job
    poly = normalize_unit_box(decode_shape(rec.latent))
    try:
        cut = flat_cut(poly, z) if z > 0 else poly
        rep = settle(cut, 0.0, sim_cfg)
    except GeometryError:
        return None
    cd, fs = geometry_scores(cut, decode_shape(gt), seed)
    return oracle(rep, sim_cfg), rep.tilt_deg, cd, fs


def flat_cut_baseline_eval(records: list[RolloutRecord], prompts: list[PromptRecord], heights=CUT_HEIGHTS,
                           seed: int = 0, sim_cfg: SimConfig = SimConfig(), workers: int = 1) -> list[dict]:
    """Cut each valid sample flat at height z (unit-box units) above its lowest point and re-score.

    The first row (z = 0) is the uncut input. A failed cut counts as unstable.
    """
    by_id = {p.prompt_id: p for p in prompts}
    valid = [r for r in records if r.valid]
    if not valid:
        raise InputError("no valid samples")
    rows = []
    for z in [0.0] + [float(h) for h in heights]:
        jobs = [(r, by_id[r.prompt_id].gt_latent, z,
                 seeding.derive_seed(seed, f"eval/{r.prompt_id}/{r.sample_index}"), sim_cfg) for r in valid]
        res = pmap(_cut_one, jobs, workers, chunksize=32)
        ok = [x for x in res if x is not None]
        rows.append({"z": z, "pct_stable": 100.0 * sum(x[0] for x in ok) / len(res),
                     "mean_rot_deg": _mean([x[1] for x in ok]), "mean_cd": _mean([x[2] for x in ok]),
                     "mean_fscore": _mean([x[3] for x in ok]), "n_failed_cuts": len(res) - len(ok)})
    return rows


# ---------------------------------------------------------------------------
# loss curves

CURVE_HEADER = ("m", "loss_linear", "loss_dpo", "dloss_linear", "dloss_dpo", "dloss_dpo_closed_form")


def loss_curves(beta: float, margins) -> list[dict]:
    """Linear (DRO-style) and DPO losses of a scalar margin and their autodiff derivatives.

    L_lin(m) = m and L_dpo(m) = -log sigmoid(-beta m); the closed form of the
    latter's derivative is beta * sigmoid(beta m), which decays like
    beta * exp(-beta |m|) for m < 0.
    """
    if not beta > 0:
        raise InputError("beta must be positive")
    m = np.asarray(margins, dtype=np.float64).ravel()
    if not np.isfinite(m).all():
        raise InputError("margins must be finite")
    lin = Tensor(m.copy(), requires_grad=True)
    lin.sum().backward()
    mt = Tensor(m.copy(), requires_grad=True)
    dpo = -(mt * -beta).log_sigmoid()
    dpo.sum().backward()
    closed = beta * np.exp(-np.logaddexp(0.0, -beta * m))
    return [{"m": float(m[i]), "loss_linear": float(m[i]), "loss_dpo": float(dpo.data[i]),
             "dloss_linear": float(lin.grad[i]), "dloss_dpo": float(mt.grad[i]),
             "dloss_dpo_closed_form": float(closed[i])} for i in range(len(m))]


# ---------------------------------------------------------------------------
# tables


def _fmt(v, digits):
    return "-" if v is None else f"{v:.{digits}f}"


def comparison_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Markdown table with one row per method."""
    out = ["| Method | % Output | % Stable | Rot. (deg) | CD | F-score |",
           "|---|---:|---:|---:|---:|---:|"]
    for name, r in rows:
        out.append(f"| {name} | {_fmt(r.pct_output, 1)} | {_fmt(r.pct_stable, 1)} | {_fmt(r.mean_rot_deg, 2)} "
                   f"| {_fmt(r.mean_cd, 4)} | {_fmt(r.mean_fscore, 1)} |")
    return "\n".join(out) + "\n"
