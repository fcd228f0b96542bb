"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a default; unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_TEMPLATE, TRAIN_WEEKS
from .lora import DEFAULT_TARGETS
from .models import LMConfig, VisionConfig
from .training import LORA_LR, STAGE_DEFAULTS, LoraConfig, StageConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    pooling: str = "mean"
    # vision tower
    image_height: int = 36
    image_width: int = 64
    patch_size: int = 4
    vision_dim: int = 32
    vision_layers: int = 2
    vision_heads: int = 2
    # language model
    vocab_size: int = 512
    lm_dim: int = 32
    lm_layers: int = 2
    lm_heads: int = 2
    context_len: int = 256
    mlp_ratio: int = 4
    # data
    template: str = DEFAULT_TEMPLATE
    train_weeks: int = TRAIN_WEEKS
    stage2_text_only: bool = True
    # schedule shared by all stages
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    stage1_batch_size: int = STAGE_DEFAULTS[1]["batch_size"]
    stage1_lr: float = STAGE_DEFAULTS[1]["learning_rate"]
    stage1_epochs: int = STAGE_DEFAULTS[1]["epochs"]
    stage1_max_steps: int = 0
    stage1_per_patch: bool = False
    vision_pretrain_steps: int = 0
    stage2_batch_size: int = STAGE_DEFAULTS[2]["batch_size"]
    stage2_lr: float = STAGE_DEFAULTS[2]["learning_rate"]
    stage2_epochs: int = STAGE_DEFAULTS[2]["epochs"]
    stage2_max_steps: int = 0
    stage2_trainable: str = "adapter+lm"
    stage3_batch_size: int = STAGE_DEFAULTS[3]["batch_size"]
    stage3_lr: float = STAGE_DEFAULTS[3]["learning_rate"]
    stage3_epochs: int = STAGE_DEFAULTS[3]["epochs"]
    stage3_max_steps: int = 0
    # LoRA
    lora_rank: int = 8
    lora_alpha: float = 0.0
    lora_lr: float = LORA_LR
    lora_targets: str = ",".join(DEFAULT_TARGETS)
    # decoding
    max_new_tokens: int = 64

    def vision(self) -> VisionConfig:
        return VisionConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            patch_size=self.patch_size,
            embed_dim=self.vision_dim,
            layers=self.vision_layers,
            heads=self.vision_heads,
            mlp_ratio=self.mlp_ratio,
        )

    def lm(self, vocab_size: int | None = None) -> LMConfig:
        return LMConfig(
            vocab_size=vocab_size or self.vocab_size,
            embed_dim=self.lm_dim,
            layers=self.lm_layers,
            heads=self.lm_heads,
            context_len=self.context_len,
            mlp_ratio=self.mlp_ratio,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def stage(self, k: int) -> StageConfig:
        steps = getattr(self, f"stage{k}_max_steps")
        return StageConfig(
            stage=k,
            batch_size=getattr(self, f"stage{k}_batch_size"),
            learning_rate=getattr(self, f"stage{k}_lr"),
            epochs=getattr(self, f"stage{k}_epochs"),
            seed=self.seed + k,
            warmup_ratio=self.warmup_ratio,
            weight_decay=self.weight_decay,
            max_steps=steps or None,
            grad_clip=self.grad_clip or None,
        )

    def lora(self) -> LoraConfig:
        return LoraConfig(
            rank=self.lora_rank,
            alpha=self.lora_alpha or None,
            targets=tuple(t.strip() for t in self.lora_targets.split(",") if t.strip()),
            seed=self.seed,
            lr=self.lora_lr,
        )

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, typ: str, raw: str):
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    types = {f.name: getattr(f.type, "__name__", f.type) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigFileError(f"{source}: dtype must be float32 or float64")
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
