"""Low-rank adapters on named weight matrices, with exact merge.

A :class:`LoraLayer` wraps a frozen base weight ``W`` (out x in) with
trainable factors ``B`` (out x r) and ``A`` (r x in); the adapted layer
computes ``x W^T + s (x A^T) B^T`` where ``s = alpha / r``. Merging folds
``s B A`` into ``W`` and drops the factors.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .models import ModelBundle, UnknownParameterError

DEFAULT_TARGETS = ("lm.blocks.*.attn.*.weight", "adapter.fc*.weight")


class LoraStateError(RuntimeError):
    pass


@dataclass
class LoraLayer:
    target: str
    base: Tensor
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return (self.scaling * (self.B.data @ self.A.data)).astype(self.base.dtype)


@dataclass
class PeftState:
    bundle: ModelBundle
    layers: dict[str, LoraLayer]
    theta: list[str]
    merged: bool = False

    @property
    def phi(self) -> dict[str, Tensor]:
        out = {}
        for target, layer in self.layers.items():
            out[f"lora.{target}.A"] = layer.A
            out[f"lora.{target}.B"] = layer.B
        return out

    def num_trainable(self) -> int:
        return sum(t.size for t in self.phi.values())


def make_layer(base: Tensor, rank: int, alpha: float | None = None, target: str = "",
               rng: np.random.Generator | None = None, init_std: float = 0.02) -> LoraLayer:
    if base.ndim != 2:
        raise ShapeError(f"LoRA target {target or '<weight>'} is not a matrix: shape {base.shape}")
    out_dim, in_dim = base.shape
    if rank < 1 or rank > min(out_dim, in_dim):
        raise ShapeError(f"rank {rank} invalid for {out_dim}x{in_dim} weight {target}")
    rng = rng or np.random.default_rng(0)
    a = rng.normal(0.0, init_std, size=(rank, in_dim)).astype(base.dtype)
    b = np.zeros((out_dim, rank), dtype=base.dtype)
    return LoraLayer(
        target=target,
        base=base,
        A=Tensor._wrap(a, requires_grad=True),
        B=Tensor._wrap(b, requires_grad=True),
        rank=rank,
        alpha=float(2 * rank if alpha is None else alpha),
    )


def lora_forward(layer: LoraLayer, x: Tensor) -> Tensor:
    """``x W^T + scaling (x A^T) B^T``; a 1-D ``x`` is treated as a single row."""
    vec = x.ndim == 1
    if vec:
        x = ag.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != layer.base.shape[1]:
        raise ShapeError(f"{layer.target}: input dim {x.shape[-1]} != in-dim {layer.base.shape[1]}")
    base = ag.matmul(x, ag.transpose(layer.base))
    low = ag.matmul(ag.matmul(x, ag.transpose(layer.A)), ag.transpose(layer.B))
    y = base + low * layer.scaling
    return ag.reshape(y, (y.shape[1],)) if vec else y


def attach(
    bundle: ModelBundle,
    target_pattern: str | Sequence[str] = DEFAULT_TARGETS,
    r: int = 8,
    alpha: float | None = None,
    seed: int = 0,
) -> PeftState:
    """Attach adapters to every weight matching the pattern(s); freeze all base parameters."""
    patterns = [target_pattern] if isinstance(target_pattern, str) else list(target_pattern)
    targets: list[str] = []
    for pat in patterns:
        hits = [n for n in bundle.params if fnmatch.fnmatchcase(n, pat)]
        if not hits:
            raise UnknownParameterError(f"LoRA pattern {pat!r} matches no parameter")
        targets += [h for h in hits if h not in targets]
    for name in targets:
        if bundle.params[name].ndim != 2:
            raise ShapeError(f"LoRA pattern matched non-matrix parameter {name} {bundle.params[name].shape}")
        if name in bundle.lora:
            raise LoraStateError(f"{name} already has an adapter attached")
    rng = np.random.default_rng(seed)
    layers = {}
    for name in targets:
        layers[name] = make_layer(bundle.params[name], r, alpha, target=name, rng=rng)
    for name in bundle.params:
        bundle.frozen[name] = True
        bundle.params[name].requires_grad = False
    bundle.lora.update(layers)
    return PeftState(bundle=bundle, layers=layers, theta=list(bundle.params))


def merge(state: PeftState) -> ModelBundle:
    """Fold each ``scaling * B A`` into its base weight and detach the adapters."""
    if state.merged:
        raise LoraStateError("adapters already merged")
    bundle = state.bundle
    for target, layer in state.layers.items():
        if not (np.isfinite(layer.A.data).all() and np.isfinite(layer.B.data).all()):
            raise LoraStateError(f"non-finite adapter factors on {target}")
    for target, layer in state.layers.items():
        w = bundle.params[target]
        w.data = w.data + layer.delta()
        layer.base = w
        bundle.lora.pop(target, None)
    state.merged = True
    return bundle


def detach(state: PeftState) -> None:
    """Remove adapters without merging."""
    for target in state.layers:
        state.bundle.lora.pop(target, None)


def load_factors(state: PeftState, tensors: dict[str, np.ndarray]) -> None:
    """Copy A/B factors from an adapter-only checkpoint mapping into ``state``."""
    for target, layer in state.layers.items():
        for part in ("A", "B"):
            key = f"lora.{target}.{part}"
            if key not in tensors:
                raise UnknownParameterError(f"adapter checkpoint lacks {key}")
            arr = np.asarray(tensors[key])
            t = getattr(layer, part)
            if arr.shape != t.shape:
                raise ShapeError(f"{key}: expected {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def adapter_tensors(state: PeftState) -> dict[str, np.ndarray]:
    """Name -> array mapping for an adapter-only checkpoint."""
    out: dict[str, np.ndarray] = {}
    for target, layer in state.layers.items():
        out[f"lora.{target}.A"] = layer.A.data
        out[f"lora.{target}.B"] = layer.B.data
        out[f"lora.{target}.alpha"] = np.asarray(layer.alpha, dtype=np.float64)
    return out
