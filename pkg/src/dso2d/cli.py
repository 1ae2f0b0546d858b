"""Command-line pipeline: synth -> pretrain -> rollout -> simulate -> finetune -> eval, plus studies.

Artifacts live under one output directory (``--out``, else the DSO2D_OUT
environment variable, else ./runs). Each stage reads the files written by
earlier stages and writes new ones; no stage rewrites its inputs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import align, datagen, evalkit, seeding, serialize, store
from .checkpoint import ModelCheckpoint
from .config import PipelineConfig, dump_config, load_config
from .errors import ConfigError, DsoError, InputError
from .flow import GuidanceConfig, PretrainConfig, pretrain
from .physics import SimConfig

log = logging.getLogger("dso2d")

COMMANDS = ("synth", "pretrain", "rollout", "simulate", "finetune", "eval", "sweep", "perturb", "flatcut",
            "curves", "verify-derivations")
OUT_ENV = "DSO2D_OUT"


class Paths:
    def __init__(self, root: Path):
        self.root = root
        self.pretrain_set = root / "pretrain_set.jsonl"
        self.train_prompts = root / "train_prompts.jsonl"
        self.eval_prompts = root / "eval_prompts.jsonl"
        self.base = root / "base.ckpt.jsonl"
        self.pretrain_log = root / "pretrain_log.jsonl"
        self.rollouts = root / "rollouts.jsonl"
        self.labeled = root / "labeled.jsonl"
        self.manifest = root / "manifest.json"

    def dso(self, objective: str) -> Path:
        return self.root / f"dso_{objective}.ckpt.jsonl"

    def finetune_log(self, objective: str) -> Path:
        return self.root / f"finetune_{objective}_log.jsonl"


def _families(cfg: PipelineConfig):
    return tuple(datagen.family_by_name(n) for n in cfg.families.names)


def _sim(cfg: PipelineConfig) -> SimConfig:
    s = cfg.simulate
    return SimConfig(contact_eps=s.contact_eps, max_events=s.max_events, cutoff_deg=s.cutoff_deg)


def _guidance(cfg: PipelineConfig) -> GuidanceConfig:
    return GuidanceConfig(drop_prob=cfg.pretrain.drop_prob, scale=cfg.rollout.guidance_scale)


def dso_config(cfg: PipelineConfig) -> align.DsoConfig:
    f = cfg.finetune
    return align.DsoConfig(objective=f.objective, beta=f.beta, weighting=f.weighting, steps=f.steps,
                           batch_size=f.batch_size, lr=f.lr, warmup_steps=f.warmup_steps,
                           weight_decay=f.weight_decay, lora_rank=f.lora_rank, lora_alpha=f.lora_alpha,
                           seed=seeding.derive_seed(cfg.run.seed, "finetune"), clip=f.clip)


def config_hash(cfg: PipelineConfig) -> str:
    """Hash of every generation parameter; the output location is not one."""
    return serialize.content_hash([dump_config(replace(cfg, run=replace(cfg.run, out="")))])


def _write_log(path: Path, kind: str, records: list[dict]):
    serialize.write_records(path, {"kind": kind}, records)


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InputError(f"missing {path.name}; run `{stage}` first")
    return path


# ---------------------------------------------------------------------------
# stages


def cmd_synth(cfg: PipelineConfig, paths: Paths, args) -> None:
    fams, cs, seed = _families(cfg), cfg.families.cond_sigma, cfg.run.seed
    pre = datagen.build_pretrain_set(fams, cfg.pretrain.n_shapes, cfg.pretrain.stable_fraction,
                                     seeding.derive_seed(seed, "synth/pretrain-set"), cs)
    r = cfg.rollout
    if r.synthetic:
        train = datagen.build_synthetic_prompts(fams, r.n_objects * r.prompts_per_object,
                                                seeding.derive_seed(seed, "synth/train-prompts"),
                                                r.synthetic_offset, cs)
    else:
        train = datagen.build_eval_prompts(fams, r.n_objects, r.prompts_per_object,
                                           seeding.derive_seed(seed, "synth/train-prompts"), cs, prefix="train")
    ev = datagen.build_eval_prompts(fams, cfg.eval.n_objects, cfg.eval.prompts_per_object,
                                    seeding.derive_seed(seed, "synth/eval-prompts"), cs, prefix="eval")
    store.save_records(paths.pretrain_set, "pretrain_set", pre)
    store.save_records(paths.train_prompts, "prompts", train, {"synthetic": r.synthetic})
    store.save_records(paths.eval_prompts, "prompts", ev)
    n_stable = sum(x.stable for x in pre)
    print(f"synth: {len(pre)} pretrain shapes ({n_stable} stable), {len(train)} train prompts, "
          f"{len(ev)} eval prompts")


def cmd_pretrain(cfg: PipelineConfig, paths: Paths, args) -> None:
    pre, _ = store.load_records(_need(paths.pretrain_set, "synth"), "pretrain_set")
    p = cfg.pretrain
    pcfg = PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.lr, warmup_steps=p.warmup_steps,
                          drop_prob=p.drop_prob, hidden=tuple(p.hidden),
                          seed=seeding.derive_seed(cfg.run.seed, "pretrain"))
    model, records = pretrain(np.stack([r.gt_latent for r in pre]), np.stack([r.cond for r in pre]), pcfg)
    digest = ModelCheckpoint(model, None, pcfg.seed, {"stage": "pretrain"}).save(paths.base)
    _write_log(paths.pretrain_log, "pretrain_log", records)
    tail = records[-min(len(records), 500):]
    print(f"pretrain: {len(records)} steps, final loss {np.mean([r['loss'] for r in tail]):.4f}, "
          f"checkpoint {digest}")


def cmd_rollout(cfg: PipelineConfig, paths: Paths, args) -> None:
    base = ModelCheckpoint.load(_need(paths.base, "pretrain"))
    prompts, _ = store.load_records(_need(paths.train_prompts, "synth"), "prompts")
    recs = datagen.rollout(base.model, base.adapter, prompts, cfg.rollout.k, cfg.rollout.sample_steps,
                           _guidance(cfg), seeding.derive_seed(cfg.run.seed, "rollout"), workers=args.workers)
    digest = store.save_records(paths.rollouts, "rollouts", recs, {"k": cfg.rollout.k})
    print(f"rollout: {len(recs)} samples ({sum(r.valid for r in recs)} valid), hash {digest}")


def cmd_simulate(cfg: PipelineConfig, paths: Paths, args) -> None:
    recs, meta = store.load_records(_need(paths.rollouts, "rollout"), "rollouts")
    labeled = datagen.label(recs, _sim(cfg), workers=args.workers)
    digest = store.save_records(paths.labeled, "rollouts", labeled, meta)
    seeds = {"master": cfg.run.seed, "rollout": seeding.derive_seed(cfg.run.seed, "rollout")}
    man = datagen.manifest_for(labeled, seeds, config_hash(cfg))
    serialize.write_json(paths.manifest, man.__dict__)
    print(f"simulate: {man.stable} stable, {man.unstable} unstable, {man.invalid} invalid; hash {digest}")


def _train_samples(cfg: PipelineConfig, paths: Paths) -> list:
    recs, _ = store.load_records(_need(paths.labeled, "simulate"), "rollouts")
    if cfg.finetune.frac < 1.0:
        recs = datagen.subset_fraction(recs, cfg.finetune.frac, seeding.derive_seed(cfg.run.seed, "finetune/frac"))
    return recs


def cmd_finetune(cfg: PipelineConfig, paths: Paths, args) -> None:
    base = ModelCheckpoint.load(_need(paths.base, "pretrain"))
    recs = _train_samples(cfg, paths)
    dcfg = dso_config(cfg)
    res = align.finetune(base, align.reward_samples(recs), dcfg)
    obj = dcfg.objective
    res.checkpoint.meta.update(frac=cfg.finetune.frac, diverged=res.diverged)
    digest = res.checkpoint.save(paths.dso(obj))
    _write_log(paths.finetune_log(obj), "finetune_log", res.log)
    status = "diverged, kept last good adapter" if res.diverged else "ok"
    last = res.log[-1]["loss"] if res.log else float("nan")
    print(f"finetune[{obj}]: {len(res.log)} steps ({status}), last loss {last:.4f}, checkpoint {digest}")
    if res.diverged:
        raise FloatingPointError("fine-tuning diverged")


def _checkpoints(paths: Paths, args) -> list[tuple[str, Path]]:
    if args.ckpt:
        return [(Path(p).name.split(".")[0], Path(p)) for p in args.ckpt]
    out = [("base", _need(paths.base, "pretrain"))]
    out += [(p.name.split(".")[0], p) for p in sorted(paths.root.glob("dso_*.ckpt.jsonl"))]
    return out


def _eval_prompts(paths: Paths):
    return store.load_records(_need(paths.eval_prompts, "synth"), "prompts")[0]


def cmd_eval(cfg: PipelineConfig, paths: Paths, args) -> None:
    prompts = _eval_prompts(paths)
    seed = seeding.derive_seed(cfg.run.seed, "eval")
    rows = []
    for name, path in _checkpoints(paths, args):
        rep = evalkit.evaluate(ModelCheckpoint.load(path), prompts, cfg.eval.samples_per_prompt, seed,
                               cfg.rollout.sample_steps, _guidance(cfg), _sim(cfg), args.workers)
        serialize.write_json(paths.root / f"eval_{name}.json", rep.to_dict())
        rows.append((name, rep))
        print(f"eval[{name}]: " + ", ".join(f"{k}={evalkit._cell(v)}" for k, v in rep.row().items()))
        if name == "base":
            pts = [(s["cd"], s["tilt_deg"]) for s in rep.per_sample if s["valid"]]
            try:
                r, pval = evalkit.correlation([a for a, _ in pts], [b for _, b in pts])
                serialize.write_json(paths.root / "correlation_base.json", {"n": len(pts), "r": r, "p": pval})
                print(f"eval[base]: corr(CD, tilt) r={r:.4f} p={pval:.4g} over {len(pts)} samples")
            except InputError as exc:
                print(f"eval[base]: correlation skipped ({exc})")
    (paths.root / "eval_table.md").write_text(evalkit.comparison_table(rows), encoding="utf-8")


def cmd_sweep(cfg: PipelineConfig, paths: Paths, args) -> None:
    axis = args.axis or cfg.sweep.axis
    values = cfg.sweep.steps_values if axis == "steps" else cfg.sweep.data_values
    base = ModelCheckpoint.load(_need(paths.base, "pretrain"))
    recs, _ = store.load_records(_need(paths.labeled, "simulate"), "rollouts")
    res = evalkit.sweep(axis, sorted(values), base, recs, dso_config(cfg), _eval_prompts(paths),
                        cfg.eval.samples_per_prompt, seeding.derive_seed(cfg.run.seed, "eval"), args.workers)
    out = paths.root / f"sweep_{axis}.csv"
    out.write_text(res.to_csv(), encoding="utf-8")
    for v, rep in res.points:
        print(f"sweep[{axis}={v}]: " + ("error" if rep is None else f"stable={rep.pct_stable:.2f}"))


def cmd_perturb(cfg: PipelineConfig, paths: Paths, args) -> None:
    prompts = _eval_prompts(paths)
    rows = []
    for name, path in _checkpoints(paths, args):
        recs = evalkit.eval_rollouts(ModelCheckpoint.load(path), prompts, 1, seeding.derive_seed(cfg.run.seed, "eval"),
                                     cfg.rollout.sample_steps, _guidance(cfg), _sim(cfg), args.workers)
        lat = [r.latent for r in recs if r.valid][:cfg.perturb.max_shapes]
        for row in evalkit.perturbation_eval(lat, cfg.perturb.thetas, cfg.perturb.runs,
                                             seeding.derive_seed(cfg.run.seed, "perturb"), args.workers):
            rows.append({"model": name, **row})
            print(f"perturb[{name}] theta_max={row['theta_max']}: rate {row['stability_rate']:.3f}")
    header = ("model", "theta_max", "stability_rate", "n_shapes", "runs")
    (paths.root / "perturb.csv").write_text(evalkit.to_csv(header, rows), encoding="utf-8")


def cmd_flatcut(cfg: PipelineConfig, paths: Paths, args) -> None:
    prompts = _eval_prompts(paths)
    seed = seeding.derive_seed(cfg.run.seed, "eval")
    base = ModelCheckpoint.load(_need(paths.base, "pretrain"))
    recs = evalkit.eval_rollouts(base, prompts, cfg.eval.samples_per_prompt, seed, cfg.rollout.sample_steps,
                                 _guidance(cfg), _sim(cfg), args.workers)
    rows = [{"method": "base" if r["z"] == 0 else f"flat cut z={r['z']}", **r}
            for r in evalkit.flat_cut_baseline_eval(recs, prompts, cfg.flatcut.heights, seed, _sim(cfg),
                                                    args.workers)]
    for name, path in _checkpoints(paths, args):
        if name == "base":
            continue
        rep = evalkit.evaluate(ModelCheckpoint.load(path), prompts, cfg.eval.samples_per_prompt, seed,
                               cfg.rollout.sample_steps, _guidance(cfg), _sim(cfg), args.workers)
        rows.append({"method": name, "z": None, "pct_stable": rep.pct_stable, "mean_rot_deg": rep.mean_rot_deg,
                     "mean_cd": rep.mean_cd, "mean_fscore": rep.mean_fscore, "n_failed_cuts": None})
    header = ("method", "z", "pct_stable", "mean_rot_deg", "mean_cd", "mean_fscore", "n_failed_cuts")
    (paths.root / "flatcut.csv").write_text(evalkit.to_csv(header, rows), encoding="utf-8")
    for r in rows:
        print(f"flatcut[{r['method']}]: stable={r['pct_stable']:.2f} cd={evalkit._cell(r['mean_cd'])}")


def cmd_curves(cfg: PipelineConfig, paths: Paths, args) -> None:
    c = cfg.curves
    rows = evalkit.loss_curves(c.beta, np.linspace(c.m_min, c.m_max, c.n))
    (paths.root / "loss_curves.csv").write_text(evalkit.to_csv(evalkit.CURVE_HEADER, rows), encoding="utf-8")
    print(f"curves: {len(rows)} points, beta={c.beta}")


def cmd_verify(cfg: PipelineConfig, paths: Paths, args) -> None:
    rep = align.verify_derivation_identities(trials=100, seed=cfg.run.seed)
    for line in rep.lines():
        print(line)
    serialize.write_json(paths.root / "derivation_report.json",
                         {"checks": rep.checks, "max_discrepancy": rep.max_discrepancy, "passed": rep.passed})
    if not rep.passed:
        raise FloatingPointError("derivation identity violated")


HELP = {
    "synth": "build pretraining shapes, training prompts and evaluation prompts",
    "pretrain": "train the base velocity model",
    "rollout": "sample k shapes per training prompt from the base model",
    "simulate": "label rollouts with the stability oracle",
    "finetune": "train a LoRA adapter with the DRO, DPO or SFT objective",
    "eval": "score checkpoints on the evaluation prompts",
    "sweep": "fine-tune and evaluate along the steps or data axis",
    "perturb": "stability rate under random initial tilts",
    "flatcut": "flat-cut baseline against fine-tuned models",
    "curves": "linear and DPO loss curves with derivatives",
    "verify-derivations": "numerically check the objective derivation identities",
}

HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "rollout": cmd_rollout, "simulate": cmd_simulate,
            "finetune": cmd_finetune, "eval": cmd_eval, "sweep": cmd_sweep, "perturb": cmd_perturb,
            "flatcut": cmd_flatcut, "curves": cmd_curves, "verify-derivations": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--workers", type=int, default=1, help="worker processes; never changes outputs")
    common.add_argument("--objective", choices=align.OBJECTIVES)
    common.add_argument("--beta", type=float)
    common.add_argument("--steps", type=int, help="fine-tuning steps")
    common.add_argument("--frac", type=float, help="fraction of training prompts used for fine-tuning")
    common.add_argument("--k", type=int, help="rollouts per prompt")
    common.add_argument("--axis", choices=("steps", "data"), help="sweep axis")
    common.add_argument("--ckpt", action="append", help="checkpoint(s) to evaluate instead of the defaults")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dso2d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out = args.out
    if not cfg.run.out:
        cfg.run.out = os.environ.get(OUT_ENV, "runs")
    f = cfg.finetune
    for flag, attr in (("objective", "objective"), ("beta", "beta"), ("steps", "steps"), ("frac", "frac")):
        v = getattr(args, flag)
        if v is not None:
            setattr(f, attr, v)
    if args.k is not None:
        cfg.rollout = replace(cfg.rollout, k=args.k)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    dso_config(cfg)  # validates the fine-tuning section
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
    except (ConfigError, InputError) as exc:
        print(f"dso2d: config error: {exc}", file=sys.stderr)
        return 2
    root = Path(cfg.run.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "effective_config.ini").write_text(dump_config(cfg), encoding="utf-8")
    try:
        HANDLERS[args.command](cfg, Paths(root), args)
    except ConfigError as exc:
        print(f"dso2d {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (DsoError, ValueError, ArithmeticError, OSError) as exc:
        print(f"dso2d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
