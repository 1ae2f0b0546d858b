#!/usr/bin/env python3
"""Run the full desk-scale protocol and print the comparison tables.

    python scripts/run_desk_experiment.py --out runs/desk [--seed N] [--workers N]

Stages: synth, pretrain, rollout, simulate, DRO and DPO fine-tuning, eval;
then the synthetic-prompt variant (own prompts, same base checkpoint) and
both sweeps. About 5 minutes on one core.
"""

import argparse
import shutil
import sys
import time
from pathlib import Path

from dso2d.cli import main as dso2d
from dso2d.config import dump_config, load_config

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


def run(*argv):
    t0 = time.time()
    code = dso2d([str(a) for a in argv])
    print(f"  [{argv[0]} done in {time.time() - t0:.1f}s, exit {code}]")
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--skip-sweeps", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    synth_out = out / "synthetic"
    common = ["--config", args.config, "--workers", args.workers]
    if args.seed is not None:
        common += ["--seed", args.seed]

    for stage in ("synth", "pretrain", "rollout", "simulate"):
        run(stage, "--out", out, *common)
    for objective in ("dro", "dpo"):
        run("finetune", "--out", out, "--objective", objective, *common)
    run("eval", "--out", out, *common)

    # synthetic prompts: fresh training prompts, same base model
    synth_cfg = out / "synthetic.ini"
    cfg = load_config(args.config)
    cfg.rollout.synthetic = True
    synth_cfg.write_text(dump_config(cfg))
    run("synth", "--out", synth_out, "--config", synth_cfg, *common[2:])
    shutil.copyfile(out / "base.ckpt.jsonl", synth_out / "base.ckpt.jsonl")
    for stage in ("rollout", "simulate"):
        run(stage, "--out", synth_out, "--config", synth_cfg, *common[2:])
    run("finetune", "--out", synth_out, "--objective", "dro", "--config", synth_cfg, *common[2:])
    run("eval", "--out", synth_out, "--config", synth_cfg, *common[2:])

    if not args.skip_sweeps:
        run("sweep", "--out", out, "--axis", "steps", *common)
        run("sweep", "--out", out, "--axis", "data", *common)

    print()
    print((out / "eval_table.md").read_text())
    print("synthetic prompts:")
    print((synth_out / "eval_table.md").read_text())


if __name__ == "__main__":
    main()
