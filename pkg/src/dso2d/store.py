"""Persisting datasets (pretrain shapes, prompts, rollouts) as hashed record files."""

from __future__ import annotations

from dataclasses import asdict, fields

import numpy as np

from . import serialize
from .datagen import PretrainRecord, PromptRecord, RolloutRecord
from .errors import CorruptionError

KINDS = {"pretrain_set": PretrainRecord, "prompts": PromptRecord, "rollouts": RolloutRecord}
ARRAY_FIELDS = {"gt_latent", "cond", "latent"}


def save_records(path, kind: str, records, meta: dict | None = None) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown record kind {kind!r}")
    return serialize.write_records(path, {"kind": kind, "meta": meta or {}}, [asdict(r) for r in records])


def load_records(path, kind: str) -> tuple[list, dict]:
    """Returns (records, header meta)."""
    head, rows = serialize.read_records(path)
    if head.get("kind") != kind:
        raise CorruptionError(f"{path}: expected {kind}, found {head.get('kind')!r}")
    cls = KINDS[kind]
    names = {f.name for f in fields(cls)}
    out = []
    for row in rows:
        if set(row) != names:
            raise CorruptionError(f"{path}: record fields {sorted(row)} do not match {kind}")
        out.append(cls(**{k: (np.asarray(v, dtype=np.float64) if k in ARRAY_FIELDS and v is not None else v)
                          for k, v in row.items()}))
    return out, head.get("meta", {})
