"""Conditional velocity MLP with optional low-rank adapters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import InputError
from .tensor import Tensor


def time_embedding(t, dim: int = 32) -> np.ndarray:
    """Sinusoidal features with frequencies 2^0 .. 2^(dim/2 - 1); shape (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 2.0 ** np.arange(dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Linear:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @property
    def dims(self) -> tuple[int, int]:
        out, inp = self.weight.shape
        return inp, out


@dataclass
class MlpModel:
    latent_dim: int
    cond_dim: int
    time_dim: int
    layers: list[Linear]
    merged: bool = False

    @classmethod
    def init(cls, latent_dim: int = 16, cond_dim: int = 16, hidden=(128, 128, 128),
             time_dim: int = 32, seed: int = 0) -> "MlpModel":
        rng = seeding.generator(seed)
        dims = [latent_dim + cond_dim + time_dim, *hidden, latent_dim]
        layers = []
        for inp, out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(inp)
            w = (2.0 * rng.random((out, inp)) - 1.0) * bound
            b = (2.0 * rng.random(out) - 1.0) * bound
            layers.append(Linear(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
        return cls(latent_dim, cond_dim, time_dim, layers)

    @property
    def input_dim(self) -> int:
        return self.latent_dim + self.cond_dim + self.time_dim

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0].dims[0]] + [layer.dims[1] for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.weight", layer.weight.data))
            out.append((f"layers.{i}.bias", layer.bias.data))
        return out

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def copy(self) -> "MlpModel":
        layers = [Linear(Tensor(l.weight.data.copy(), l.weight.requires_grad),
                         Tensor(l.bias.data.copy(), l.bias.requires_grad)) for l in self.layers]
        return MlpModel(self.latent_dim, self.cond_dim, self.time_dim, layers, self.merged)


@dataclass
class LoraAdapter:
    """Per-layer low-rank update: W_eff = W + (alpha / rank) * B @ A."""

    rank: int
    alpha: float
    A: list[Tensor] = field(default_factory=list)  # (rank, in)
    B: list[Tensor] = field(default_factory=list)  # (out, rank)
    consumed: bool = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, model: MlpModel, rank: int = 8, alpha: float = 16.0, seed: int = 0) -> "LoraAdapter":
        if rank < 1:
            raise InputError("LoRA rank must be >= 1")
        rng = seeding.generator(seed)
        A, B = [], []
        for layer in model.layers:
            inp, out = layer.dims
            bound = 1.0 / np.sqrt(inp)
            A.append(Tensor((2.0 * rng.random((rank, inp)) - 1.0) * bound, requires_grad=True))
            B.append(Tensor(np.zeros((out, rank)), requires_grad=True))
        return cls(rank, float(alpha), A, B)

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.A, self.B) for p in pair]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (a, b) in enumerate(zip(self.A, self.B)):
            out.append((f"lora.{i}.A", a.data))
            out.append((f"lora.{i}.B", b.data))
        return out

    def check(self, model: MlpModel):
        if len(self.A) != len(model.layers):
            raise InputError("adapter layer count does not match model")
        for a, b, layer in zip(self.A, self.B, model.layers):
            inp, out = layer.dims
            if a.shape != (self.rank, inp) or b.shape != (out, self.rank):
                raise InputError(f"adapter rank/shape mismatch at layer with dims {(inp, out)}")


def model_input(model: MlpModel, x_t, cond, t) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    n = x_t.shape[0]
    if x_t.shape[1] != model.latent_dim or cond.shape[1] != model.cond_dim:
        raise InputError(f"expected latent dim {model.latent_dim} and cond dim {model.cond_dim}, "
                         f"got {x_t.shape[1]} and {cond.shape[1]}")
    if cond.shape[0] != n:
        cond = np.broadcast_to(cond, (n, model.cond_dim))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InputError("t must lie in [0, 1]")
    return np.concatenate([x_t, cond, time_embedding(t, model.time_dim)], axis=1)


def forward(model: MlpModel, adapter: LoraAdapter | None, x_t, cond, t) -> Tensor:
    """Velocity prediction, shape (n, latent_dim)."""
    if adapter is not None:
        adapter.check(model)
        if adapter.consumed:
            raise InputError("adapter has already been merged into a model")
    h = Tensor(model_input(model, x_t, cond, t))
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        out = h @ layer.weight.T + layer.bias
        if adapter is not None:
            out = out + ((h @ adapter.A[i].T) @ adapter.B[i].T) * adapter.scale
        h = out if i == last else out.silu()
    return h


def lora_merge(model: MlpModel, adapter: LoraAdapter) -> MlpModel:
    """Fold the adapter into a new model; the adapter cannot be merged again."""
    if model.merged or adapter.consumed:
        raise InputError("adapter already merged")
    adapter.check(model)
    merged = model.copy()
    for layer, a, b in zip(merged.layers, adapter.A, adapter.B):
        layer.weight.data = layer.weight.data + adapter.scale * (b.data @ a.data)
    merged.merged = True
    adapter.consumed = True
    return merged
