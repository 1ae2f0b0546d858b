"""Model checkpoints: base MLP weights, optional LoRA adapter, training metadata."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .errors import CorruptionError
from .nn import Linear, LoraAdapter, MlpModel
from .tensor import Tensor


@dataclass
class ModelCheckpoint:
    model: MlpModel
    adapter: LoraAdapter | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        lora = None if self.adapter is None else {"rank": self.adapter.rank, "alpha": self.adapter.alpha}
        return {
            "kind": "checkpoint",
            "D": self.model.latent_dim,
            "cond_dim": self.model.cond_dim,
            "time_dim": self.model.time_dim,
            "layer_dims": self.model.layer_dims,
            "merged": self.model.merged,
            "lora": lora,
            "seed": self.seed,
            "meta": self.meta,
        }

    def tensor_records(self) -> list[dict]:
        named = self.model.named_tensors()
        if self.adapter is not None:
            named += self.adapter.named_tensors()
        return [{"name": n, "shape": list(a.shape), "values": a.ravel()} for n, a in named]

    def content_hash(self) -> str:
        return serialize.content_hash([serialize.dumps(r) for r in self.tensor_records()])

    def save(self, path) -> str:
        return serialize.write_records(path, self.header(), self.tensor_records())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        head, records = serialize.read_records(path)
        if head.get("kind") != "checkpoint":
            raise CorruptionError(f"{path}: not a checkpoint")
        arrays = {r["name"]: np.asarray(r["values"], dtype=np.float64).reshape(r["shape"]) for r in records}
        n_layers = len(head["layer_dims"]) - 1
        try:
            layers = [Linear(Tensor(arrays[f"layers.{i}.weight"]), Tensor(arrays[f"layers.{i}.bias"]))
                      for i in range(n_layers)]
            model = MlpModel(head["D"], head["cond_dim"], head["time_dim"], layers, head["merged"])
            adapter = None
            if head["lora"] is not None:
                adapter = LoraAdapter(head["lora"]["rank"], float(head["lora"]["alpha"]),
                                      [Tensor(arrays[f"lora.{i}.A"]) for i in range(n_layers)],
                                      [Tensor(arrays[f"lora.{i}.B"]) for i in range(n_layers)])
        except KeyError as exc:
            raise CorruptionError(f"{path}: missing tensor {exc}") from exc
        return cls(model, adapter, head["seed"], head["meta"])
