from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class Param:
    """A named learnable tensor plus its optimiser flags."""

    name: str
    value: Tensor
    decay_exempt: bool = False
    frozen: bool = False
    stage: str = ""

    @property
    def grad(self) -> np.ndarray:
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class ParamStore:
    params: dict[str, Param] = field(default_factory=dict)

    def add(
        self,
        name: str,
        data: np.ndarray,
        decay_exempt: bool = False,
        frozen: bool = False,
        stage: str = "",
    ) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=not frozen, name=name)
        self.params[name] = Param(name, t, decay_exempt, frozen, stage)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def set_frozen(self, prefix: str, frozen: bool = True) -> None:
        for p in self.params.values():
            if p.name.startswith(prefix):
                p.frozen = frozen
                p.value.requires_grad = not frozen
                p.value.grad = None

    def trainable(self) -> list[Param]:
        return [p for p in self.params.values() if not p.frozen]

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names, shapes and raw bytes of matching parameters."""
        h = hashlib.sha256()
        for name in sorted(self.names(prefix)):
            v = self.params[name].value.data
            h.update(name.encode())
            h.update(np.asarray(v.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy_from(self, other: "ParamStore", prefix: str = "") -> None:
        for name in other.names(prefix):
            src = other.params[name]
            if name not in self.params:
                raise KeyError(f"parameter {name!r} missing from target store")
            dst = self.params[name]
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch for {name}: {dst.shape} vs {src.shape}")
            dst.value.data[...] = src.value.data


def init_affine(
    store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator, stage: str = "", bias: bool = True
) -> None:
    bound = 1.0 / np.sqrt(d_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, size=(d_in, d_out)), stage=stage)
    if bias:
        store.add(f"{name}.b", np.zeros(d_out), decay_exempt=True, stage=stage)


def init_layer_norm(store: ParamStore, name: str, d: int, stage: str = "") -> None:
    store.add(f"{name}.gamma", np.ones(d), decay_exempt=True, stage=stage)
    store.add(f"{name}.beta", np.zeros(d), decay_exempt=True, stage=stage)
