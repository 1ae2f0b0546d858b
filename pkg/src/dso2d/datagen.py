"""Synthetic shape families, prompts, rollouts and simulation labels.

Ground-truth shapes are parametric polygons (slabs, leaning towers, mushrooms,
top-heavy cones) sampled along K rays from an interior point, which yields a
latent the star-shaped decoder reproduces. A prompt's condition is the
ground-truth latent plus Gaussian corruption, standing in for a rendered image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import seeding
from .errors import ConfigError, DecodeError, GeometryError, InputError
from .flow import GuidanceConfig, sample_batch
from .geometry import decode_shape, softplus_inv
from .nn import LoraAdapter, MlpModel
from .parallel import pmap
from .physics import SimConfig, oracle, settle

K_DEFAULT = 16
R_MIN = 0.05
MIN_EXCESS = 0.02  # smallest radius above r_min a ground-truth ray may have
COND_SIGMA = 0.5  # condition noise; leaves the generator room to choose among shapes


def ray_radii(poly: np.ndarray, origin, K: int) -> np.ndarray:
    """Distance from ``origin`` to the first boundary hit along K evenly spaced rays."""
    ang = 2.0 * np.pi * np.arange(K) / K
    u = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    a = poly - np.asarray(origin)
    e = np.roll(a, -1, axis=0) - a
    den = u[:, None, 0] * e[None, :, 1] - u[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (a[None, :, 0] * e[None, :, 1] - a[None, :, 1] * e[None, :, 0]) / den
        s = (a[None, :, 0] * u[:, None, 1] - a[None, :, 1] * u[:, None, 0]) / den
    ok = (np.abs(den) > 1e-14) & (s >= -1e-12) & (s <= 1 + 1e-12) & (r > 1e-9)
    r = np.where(ok, r, np.inf).min(axis=1)
    if not np.isfinite(r).all():
        raise GeometryError("origin is not inside the parametric polygon")
    return r


def _rect_poly(x0, x1, y0, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def _slab(p):
    return _rect_poly(-p["half_width"], p["half_width"], -p["half_height"], p["half_height"]), (0.0, 0.0)


def _tower(p):
    a, h, d = p["half_width"], p["half_height"], p["lean"]
    poly = np.array([[-a - d, -h], [a - d, -h], [a + d, h], [-a + d, h]])
    return poly, (0.0, 0.0)


def _mushroom(p):
    ws, hs, rc, hc, dx = p["stem_half_width"], p["stem_height"], p["cap_radius"], p["cap_height"], p["cap_offset"]
    n = 12
    ang = np.linspace(0.0, np.pi, n + 1)
    cap = np.stack([dx + rc * np.cos(ang), hc * np.sin(ang)], axis=1)
    poly = np.concatenate([
        [[-ws, -hs], [ws, -hs], [ws, 0.0]],
        cap,  # from (dx + rc, 0) over the top to (dx - rc, 0)
        [[-ws, 0.0]],
    ])
    return poly, (0.0, -0.1 * hs)


def _cone(p):
    b, top, h, d = p["base_half_width"], p["top_half_width"], p["half_height"], p["lean"]
    poly = np.array([[-b, -h], [b, -h], [top + d, h], [-top + d, h]])
    return poly, (0.0, -0.2 * h)


@dataclass(frozen=True)
class ShapeFamily:
    name: str
    ranges: dict
    builder: Callable
    stability_bias: float  # nominal share of stable draws, informational only
    weight: float = 1.0  # relative sampling frequency
    jitter: float = 0.15  # i.i.d. latent noise on top of the parametric shape

    def draw_params(self, rng: np.random.Generator) -> dict:
        return {k: float(lo + (hi - lo) * rng.random()) for k, (lo, hi) in sorted(self.ranges.items())}

    def latent(self, params: dict, rng: np.random.Generator | None = None, K: int = K_DEFAULT,
               r_min: float = R_MIN) -> np.ndarray:
        poly, origin = self.builder(params)
        r = ray_radii(poly, origin, K)
        z = softplus_inv(np.maximum(r - r_min, MIN_EXCESS))
        if rng is not None and self.jitter > 0:
            z = z + self.jitter * seeding.normal(rng, K)
        return z


DEFAULT_FAMILIES = (
    ShapeFamily("slab", {"half_width": (0.8, 1.3), "half_height": (0.25, 0.45)}, _slab, 1.0, weight=0.05),
    ShapeFamily("tower", {"half_width": (0.3, 0.55), "half_height": (0.7, 1.1), "lean": (-0.7, 0.7)},
                _tower, 0.25, weight=0.3),
    ShapeFamily("mushroom", {"stem_half_width": (0.12, 0.25), "stem_height": (0.5, 0.9),
                             "cap_radius": (0.6, 1.0), "cap_height": (0.4, 0.7),
                             "cap_offset": (-0.3, 0.3)}, _mushroom, 0.15, weight=0.3),
    ShapeFamily("cone", {"base_half_width": (0.15, 0.4), "top_half_width": (0.7, 1.1),
                         "half_height": (0.5, 0.9), "lean": (-0.4, 0.4)}, _cone, 0.55, weight=0.3),
)


def family_by_name(name: str, families=DEFAULT_FAMILIES) -> ShapeFamily:
    for fam in families:
        if fam.name == name:
            return fam
    raise ConfigError(f"unknown shape family {name!r}")


def label_latent(latent, sim_cfg: SimConfig = SimConfig()) -> tuple[float | None, int]:
    """(tilt in degrees, oracle bit); undecodable latents give (None, 0)."""
    try:
        poly = decode_shape(latent)
    except DecodeError:
        return None, 0
    report = settle(poly, 0.0, sim_cfg)
    return report.tilt_deg, oracle(report, sim_cfg)


@dataclass
class PromptRecord:
    prompt_id: str
    cond: np.ndarray
    family: str
    object_id: str
    gt_latent: np.ndarray | None = None
    gt_stable: bool | None = None
    gt_tilt: float | None = None


@dataclass
class RolloutRecord:
    prompt_id: str
    sample_index: int
    latent: np.ndarray
    cond: np.ndarray
    valid: bool
    seed: int
    tilt_deg: float | None = None
    o: int | None = None

    @property
    def labeled(self) -> bool:
        return self.o is not None


@dataclass
class PretrainRecord:
    gt_latent: np.ndarray
    cond: np.ndarray
    family: str
    stable: bool
    tilt_deg: float


def _draw_object(families, rng, K=K_DEFAULT):
    w = np.array([f.weight for f in families], dtype=np.float64)
    idx = int(np.searchsorted(np.cumsum(w / w.sum()), rng.random(), side="right"))
    fam = families[min(idx, len(families) - 1)]
    params = fam.draw_params(rng)
    return fam, fam.latent(params, rng, K)


def build_pretrain_set(families=DEFAULT_FAMILIES, n: int = 5000, stable_fraction: float = 0.7,
                       seed: int = 0, cond_sigma: float = COND_SIGMA, max_draws: int = 10_000,
                       sim_cfg: SimConfig = SimConfig()) -> list[PretrainRecord]:
    """Ground-truth shapes filtered by the oracle so exactly round(n * stable_fraction) are stable."""
    if not 0.0 < stable_fraction <= 1.0:
        raise InputError("stable_fraction must lie in (0, 1]")
    if n < 1:
        raise InputError("n must be >= 1")
    rng = seeding.generator(seed)
    want = {1: int(round(n * stable_fraction))}
    want[0] = n - want[1]
    plan = [1] * want[1] + [0] * want[0]
    order = rng.permutation(n)
    plan = [plan[i] for i in order]
    out = []
    for target in plan:
        for _ in range(max_draws):
            fam, z = _draw_object(families, rng)
            tilt, o = label_latent(z, sim_cfg)
            if o == target:
                break
        else:
            raise ConfigError(f"no {'stable' if target else 'unstable'} shape within {max_draws} draws")
        cond = z + cond_sigma * seeding.normal(rng, z.size)
        out.append(PretrainRecord(z, cond, fam.name, bool(o), tilt))
    return out


def build_eval_prompts(families=DEFAULT_FAMILIES, n_objects: int = 65, prompts_per_object: int = 12,
                       seed: int = 0, cond_sigma: float = COND_SIGMA, prefix: str = "eval",
                       max_draws: int = 10_000, sim_cfg: SimConfig = SimConfig()) -> list[PromptRecord]:
    """Prompts built only from ground-truth shapes that are themselves stable."""
    if prompts_per_object < 1 or n_objects < 1:
        raise InputError("need at least one object and one prompt per object")
    rng = seeding.generator(seed)
    prompts = []
    draws = 0
    for obj in range(n_objects):
        while True:
            draws += 1
            if draws > max_draws * n_objects:
                raise ConfigError("not enough stable ground-truth objects")
            fam, z = _draw_object(families, rng)
            tilt, o = label_latent(z, sim_cfg)
            if o == 1:
                break
        object_id = f"{prefix}-{obj:04d}"
        for j in range(prompts_per_object):
            cond = z + cond_sigma * seeding.normal(rng, z.size)
            prompts.append(PromptRecord(f"{object_id}-{j:02d}", cond, fam.name, object_id,
                                        z.copy(), True, tilt))
    return prompts


def build_synthetic_prompts(families=DEFAULT_FAMILIES, n: int = 384, seed: int = 0,
                            offset: float = 0.1, cond_sigma: float = COND_SIGMA, prefix: str = "synth",
                            upright_only: bool = True, max_draws: int = 10_000,
                            sim_cfg: SimConfig = SimConfig()) -> list[PromptRecord]:
    """Conditions from a shifted family prior; the underlying shape is discarded.

    With ``upright_only`` the hidden shape is drawn among stable designs (the
    prompts depict objects meant to stand), but nothing about it is kept.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = seeding.generator(seed)
    prompts = []
    for i in range(n):
        for _ in range(max_draws):
            fam, z = _draw_object(families, rng)
            if not upright_only or label_latent(z, sim_cfg)[1] == 1:
                break
        else:
            raise ConfigError("not enough stable designs for synthetic prompts")
        cond = z + offset + cond_sigma * seeding.normal(rng, z.size)
        prompts.append(PromptRecord(f"{prefix}-{i:05d}", cond, fam.name, f"{prefix}-{i:05d}"))
    return prompts


def _decodable(latent) -> bool:
    try:
        decode_shape(latent)
    except DecodeError:
        return False
    return True


def _sample_chunk(job):
    model, adapter, conds, seeds, steps, guidance = job
    return sample_batch(model, adapter, conds, seeds, steps, guidance)


def rollout(model: MlpModel, adapter: LoraAdapter | None, prompts: list[PromptRecord], k: int = 4,
            steps: int = 12, guidance: GuidanceConfig = GuidanceConfig(), seed: int = 0,
            chunk: int = 64, workers: int = 1) -> list[RolloutRecord]:
    """k samples per prompt with per-record derived seeds, ordered by (prompt, sample index).

    A record is valid when sampling stayed finite and the latent decodes.
    Chunk boundaries are fixed by ``chunk``, so ``workers`` cannot change results.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    jobs = [(p, j, seeding.derive_seed(seed, f"rollout/{p.prompt_id}/{j}")) for p in prompts for j in range(k)]
    parts = [jobs[i:i + chunk] for i in range(0, len(jobs), chunk)]
    results = pmap(_sample_chunk, [(model, adapter, np.stack([p.cond for p, _, _ in part]),
                                    [s for _, _, s in part], steps, guidance) for part in parts],
                   workers, chunksize=1)
    out = []
    for part, (x, valid) in zip(parts, results):
        for (p, j, s), xi, vi in zip(part, x, valid):
            out.append(RolloutRecord(p.prompt_id, j, xi, p.cond.copy(), bool(vi) and _decodable(xi), s))
    return out


def _label_one(args):
    r, sim_cfg = args
    if not r.valid:
        return replace(r, tilt_deg=None, o=0)
    tilt, o = label_latent(r.latent, sim_cfg)
    return replace(r, tilt_deg=tilt, o=o)


def label(records: list[RolloutRecord], sim_cfg: SimConfig = SimConfig(), workers: int = 1) -> list[RolloutRecord]:
    """Attach tilt and oracle bit; invalid samples get o = 0 and no tilt."""
    return pmap(_label_one, [(r, sim_cfg) for r in records], workers, chunksize=64)


def group_by_prompt(records) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.prompt_id, []).append(r)
    return groups


def subset_fraction(records: list[RolloutRecord], frac: float, seed: int = 0) -> list[RolloutRecord]:
    """Keep ceil(frac * #prompts) prompts (a seeded prefix, so smaller fractions nest)."""
    if not 0.0 < frac <= 1.0:
        raise InputError("frac must lie in (0, 1]")
    ids = sorted(group_by_prompt(records))
    n_keep = math.ceil(frac * len(ids))
    if n_keep == 0:
        raise InputError("subset is empty")
    perm = seeding.generator(seed).permutation(len(ids))
    keep = {ids[i] for i in perm[:n_keep]}
    return [r for r in records if r.prompt_id in keep]


@dataclass
class DatasetManifest:
    counts: dict
    seeds: dict
    config_hash: str
    per_prompt: dict = field(default_factory=dict)
    stable: int = 0
    unstable: int = 0
    invalid: int = 0


def manifest_for(records: list[RolloutRecord], seeds: dict, config_hash: str, split: str = "train") -> DatasetManifest:
    per_prompt = {pid: len(rs) for pid, rs in group_by_prompt(records).items()}
    stable = sum(1 for r in records if r.valid and r.o == 1)
    unstable = sum(1 for r in records if r.valid and r.o == 0)
    invalid = sum(1 for r in records if not r.valid)
    return DatasetManifest({split: len(records), "prompts": len(per_prompt)}, seeds, config_hash,
                           per_prompt, stable, unstable, invalid)
