"""Pipeline configuration in a sectioned key = value file.

Every section maps onto a dataclass; unknown sections or keys are errors.
Fine-tuning defaults are the reference training schedule (lr 5e-6, warmup
2000, weight decay 0.01, batch 48, beta 500); the desk-scale preset in
configs/desk.ini retunes lr and beta.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0
    out: str = ""


@dataclass
class FamiliesSection:
    names: tuple = ("slab", "tower", "mushroom", "cone")
    cond_sigma: float = 0.5


@dataclass
class PretrainSection:
    n_shapes: int = 5000
    stable_fraction: float = 0.7
    steps: int = 20000
    batch_size: int = 48
    lr: float = 1e-3
    warmup_steps: int = 500
    drop_prob: float = 0.1
    hidden: tuple = (128, 128, 128)


@dataclass
class RolloutSection:
    n_objects: int = 512
    prompts_per_object: int = 2
    k: int = 4
    sample_steps: int = 12
    guidance_scale: float = 1.0
    synthetic: bool = False
    synthetic_offset: float = 0.1


@dataclass
class SimulateSection:
    cutoff_deg: float = 20.0
    contact_eps: float = 1e-7
    max_events: int = 256


@dataclass
class FinetuneSection:
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
    clip: float = 1.0
    frac: float = 1.0


@dataclass
class EvalSection:
    n_objects: int = 65
    prompts_per_object: int = 12
    samples_per_prompt: int = 1


@dataclass
class SweepSection:
    axis: str = "steps"
    steps_values: tuple = (1000, 2000, 4000)
    data_values: tuple = (0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0)


@dataclass
class PerturbSection:
    thetas: tuple = (0.01, 0.02, 0.04, 0.08)
    runs: int = 100
    max_shapes: int = 200


@dataclass
class FlatcutSection:
    heights: tuple = (0.05, 0.1, 0.15, 0.2)


@dataclass
class CurvesSection:
    beta: float = 500.0
    m_min: float = -10.0
    m_max: float = 10.0
    n: int = 201


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    families: FamiliesSection = field(default_factory=FamiliesSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    flatcut: FlatcutSection = field(default_factory=FlatcutSection)
    curves: CurvesSection = field(default_factory=CurvesSection)


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = PipelineConfig()
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"{source}: unknown section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            setattr(obj, key, _convert(raw, getattr(obj, key), f"{source} [{section}] {key}"))
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        lines.append(f"[{sec.name}]")
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
