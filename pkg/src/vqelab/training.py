"""Three-stage training: adapter alignment, instruction tuning, LoRA fine-tuning.

Stage 1 fits the adapter so pooled vision features land on pooled LM text
features (MSE). Stage 2 trains adapter + LM with next-token cross-entropy on
response tokens. Stage 3 trains LoRA factors only with the same objective,
then merges them into the base weights.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import lora as lora_mod
from .autograd import Tensor, no_grad
from .checkpoint import save_checkpoint, write_tensors
from .dataset import (
    DEFAULT_TEMPLATE,
    Corpus,
    EncodedExample,
    QAPair,
    Vocab,
    encode_example,
)
from .models import (
    ModelBundle,
    adapter_forward,
    embed_text,
    encode_image,
    image_prefix,
    lm_hidden,
    set_frozen,
    sigmoid_pairwise_loss,
    trainable_params,
)
from .rng import SplitMix64
from .synthetic import synth_slide

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    1: {"batch_size": 256, "learning_rate": 1e-3, "epochs": 2},
    2: {"batch_size": 128, "learning_rate": 2e-5, "epochs": 2},
    3: {"batch_size": 128, "learning_rate": 2e-4, "epochs": 10},
}
# The A/B factors get their own rate; the stage-3 rate covers any other unfrozen parameter.
LORA_LR = 2e-5


class DataError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    batch_size: int
    learning_rate: float
    epochs: int
    seed: int = 0
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    max_steps: int | None = None
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")

    @classmethod
    def defaults(cls, stage: int, **overrides) -> "StageConfig":
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float | None = None
    targets: tuple[str, ...] = lora_mod.DEFAULT_TARGETS
    seed: int = 0
    lr: float = LORA_LR


# -- optimiser and schedule -------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    state: AdamWState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    lr: float | dict[str, float],
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update of every tensor in ``params``."""
    for name in params:
        if grads.get(name) is None:
            raise GradientError(f"no gradient for trainable parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr[name] if isinstance(lr, dict) else lr
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p.data
        p.data = (p.data - rate * update).astype(p.dtype)


def warmup_steps(config: StageConfig, total_steps: int) -> int:
    return math.ceil(config.warmup_ratio * total_steps)


def lr_at(config: StageConfig, step: int, total_steps: int) -> float:
    """Linear warmup to the peak rate, then half-cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.learning_rate
    w = warmup_steps(config, total_steps)
    if step < w:
        return peak * step / w
    if total_steps == w:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))


# -- generic loop -------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    stage: int
    lr: float
    loss: float


@dataclass
class StageResult:
    stage: int
    steps: list[StepRecord]
    epoch_losses: list[float]
    skipped: int = 0
    checkpoint: Path | None = None
    adapter_checkpoint: Path | None = None
    peft: lora_mod.PeftState | None = None


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale


def optimize(
    bundle: ModelBundle,
    items: Sequence,
    loss_fn: Callable[[list], Tensor],
    config: StageConfig,
    lr_scale: dict[str, float] | None = None,
) -> tuple[list[StepRecord], list[float]]:
    """Shuffled mini-batch AdamW over ``items`` with the warmup/cosine schedule.

    Runs ``epochs`` passes, or exactly ``max_steps`` updates when set (cycling
    through further epochs as needed).
    """
    params = dict(trainable_params(bundle))
    if not params:
        raise ValueError("no trainable parameters")
    n = len(items)
    if n == 0:
        raise DataError("no training examples")
    bs = min(config.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = config.max_steps or config.epochs * per_epoch
    lr_scale = lr_scale or {}
    rng = SplitMix64(config.seed)
    state = AdamWState()
    records: list[StepRecord] = []
    epoch_losses: list[float] = []
    step = 0
    while step < total:
        order = rng.permutation(n)
        losses = []
        for b in range(per_epoch):
            if step >= total:
                break
            batch = [items[i] for i in order[b * bs:(b + 1) * bs]]
            step += 1
            for p in params.values():
                p.grad = None
            loss = loss_fn(batch)
            ag.backward(loss)
            # a parameter the batch never reached (e.g. the adapter on text-only batches) gets zero
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            if config.grad_clip is not None:
                _clip(grads, config.grad_clip)
            lr = lr_at(config, step, total)
            rates = {k: lr * lr_scale.get(k, 1.0) for k in params}
            adamw_step(state, params, grads, rates, config.weight_decay)
            val = float(loss.data)
            losses.append(val)
            records.append(StepRecord(step, config.stage, lr, val))
        epoch_losses.append(float(np.mean(losses)))
        log.info("stage %d epoch %d mean loss %.6f", config.stage, len(epoch_losses), epoch_losses[-1])
    for p in params.values():
        p.grad = None
    return records, epoch_losses


def write_step_log(records: Sequence[StepRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "lr", "loss"])
        for r in records:
            w.writerow([r.step, r.stage, repr(r.lr), repr(r.loss)])
    return path


# -- stage 1 ----------------------------------------------------------------------------

@dataclass
class AlignmentBatch:
    """Visual inputs ``v`` (N x d_v, or N x P x d_v per patch) and text targets ``t`` (N x d)."""

    v: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        if self.v.shape[0] != self.t.shape[0]:
            raise ValueError(f"alignment batch: {self.v.shape[0]} visual vs {self.t.shape[0]} text samples")
        if self.t.ndim != 2 or self.v.ndim not in (2, 3):
            raise ValueError(f"alignment batch shapes v={self.v.shape} t={self.t.shape}")

    @property
    def n(self) -> int:
        return self.t.shape[0]


class SlideCache:
    """Memoised synthetic slides keyed by (week, page)."""

    def __init__(self, bundle: ModelBundle) -> None:
        self.h = bundle.vision_cfg.image_height
        self.w = bundle.vision_cfg.image_width
        self.dtype = bundle.dtype
        self._cache: dict = {}

    def __call__(self, key: tuple[int, int]) -> Tensor:
        img = self._cache.get(key)
        if img is None:
            img = synth_slide(key[0], key[1], self.h, self.w, self.dtype)
            self._cache[key] = img
        return img


def alignment_features(
    bundle: ModelBundle, corpus: Corpus, vocab: Vocab, per_patch: bool = False
) -> AlignmentBatch:
    """Frozen vision features of each slide paired with pooled LM features of its transcript."""
    slides = SlideCache(bundle)
    limit = bundle.lm_cfg.context_len
    vs, ts = [], []
    with no_grad():
        for tr in corpus.transcripts:
            feats, pooled = encode_image(bundle, slides(tr.key))
            vs.append(feats.data if per_patch else pooled.data)
            ids = vocab.encode(tr.text)[:limit] or [vocab.index.get(".", 3)]
            _, tpool = embed_text(bundle, ids)
            ts.append(tpool.data)
    if not vs:
        raise DataError("corpus has no slide-transcript pairs")
    return AlignmentBatch(np.stack(vs), np.stack(ts))


def alignment_loss(bundle: ModelBundle, v: np.ndarray, t: np.ndarray) -> Tensor:
    target = Tensor._wrap(t.astype(bundle.dtype))
    if v.ndim == 2:
        pred = adapter_forward(bundle, Tensor._wrap(v.astype(bundle.dtype)))
    else:
        rows = []
        for sample in v:
            out = adapter_forward(bundle, Tensor._wrap(sample.astype(bundle.dtype)))
            rows.append(ag.reshape(ag.mean(out, axis=0), (1, out.shape[1])))
        pred = ag.concat(rows, axis=0)
    return ag.mse_loss(pred, target)


def freeze_for_stage(bundle: ModelBundle, stage: int, stage2_trainable: str = "adapter+lm") -> None:
    set_frozen(bundle, "*", True)
    if stage == 1:
        set_frozen(bundle, "adapter.*", False)
    elif stage == 2:
        set_frozen(bundle, "adapter.*", False)
        if stage2_trainable == "adapter+lm":
            set_frozen(bundle, "lm.*", False)
        elif stage2_trainable != "adapter":
            raise ValueError(f"unknown stage-2 trainable set {stage2_trainable!r}")


def fit_alignment(bundle: ModelBundle, batch: AlignmentBatch, config: StageConfig) -> StageResult:
    freeze_for_stage(bundle, 1)
    records, epochs = optimize(
        bundle, list(range(batch.n)), lambda idx: alignment_loss(bundle, batch.v[idx], batch.t[idx]), config
    )
    return StageResult(1, records, epochs)


def run_stage1(
    bundle: ModelBundle,
    corpus: Corpus,
    config: StageConfig | None = None,
    vocab: Vocab | None = None,
    per_patch: bool = False,
    out_dir: str | os.PathLike | None = None,
) -> StageResult:
    """Align adapter(vision(slide)) with LM(transcript) under MSE; vision and LM frozen."""
    config = config or StageConfig.defaults(1)
    if not corpus.transcripts:
        raise DataError("stage 1 needs slide-transcript pairs; corpus is empty")
    if vocab is None:
        from .dataset import build_vocab

        vocab = build_vocab(corpus, bundle.lm_cfg.vocab_size)
    batch = alignment_features(bundle, corpus, vocab, per_patch)
    result = fit_alignment(bundle, batch, config)
    if out_dir is not None:
        out = Path(out_dir)
        result.checkpoint = save_checkpoint(bundle, out / "stage1.svqe")
        write_step_log(result.steps, out / "stage1_log.csv")
    return result


def pretrain_vision(
    bundle: ModelBundle,
    corpus: Corpus,
    vocab: Vocab,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    temperature: float = 1.0,
    bias: float = -2.0,
    seed: int = 0,
) -> list[float]:
    """Pairwise-sigmoid pretraining of the vision tower against frozen LM text features.

    The vision tower is frozen again afterwards.
    """
    if bundle.vision_cfg.embed_dim != bundle.lm_cfg.embed_dim:
        raise ValueError("vision pretraining needs equal vision and LM widths")
    if steps <= 0 or not corpus.transcripts:
        return []
    slides = SlideCache(bundle)
    keys = [t.key for t in corpus.transcripts]
    limit = bundle.lm_cfg.context_len
    with no_grad():
        text = {
            t.key: embed_text(bundle, vocab.encode(t.text)[:limit] or [3])[1].data for t in corpus.transcripts
        }
    set_frozen(bundle, "*", True)
    set_frozen(bundle, "vision.*", False)

    def loss_fn(batch_keys):
        pooled = [ag.reshape(encode_image(bundle, slides(k))[1], (1, -1)) for k in batch_keys]
        img = ag.concat(pooled, axis=0) if len(pooled) > 1 else pooled[0]
        txt = Tensor._wrap(np.stack([text[k] for k in batch_keys]))
        return sigmoid_pairwise_loss(img, txt, temperature, bias)

    cfg = StageConfig(stage=1, batch_size=batch_size, learning_rate=lr, epochs=1, seed=seed, max_steps=steps)
    records, _ = optimize(bundle, keys, loss_fn, cfg)
    set_frozen(bundle, "vision.*", True)
    return [r.loss for r in records]


# -- stages 2 and 3 -----------------------------------------------------------------------

def encode_corpus(
    qas: Sequence[QAPair],
    corpus: Corpus,
    vocab: Vocab,
    template: str = DEFAULT_TEMPLATE,
    with_image: bool = True,
) -> list[EncodedExample]:
    out = []
    for q in qas:
        tr = corpus.transcript(q.key) if q.key in corpus.slide_index else None
        out.append(encode_example(q, tr, vocab, template, with_image=with_image))
    return out


def target_positions(ex: EncodedExample, include_eos: bool = True) -> list[int]:
    """Sequence positions whose tokens are predicted by the loss."""
    pos = [i for i, m in enumerate(ex.response_mask) if m]
    if include_eos and pos and pos[-1] + 1 < len(ex.ids):
        pos.append(pos[-1] + 1)
    return pos


def fits_context(bundle: ModelBundle, ex: EncodedExample) -> bool:
    k = bundle.vision_cfg.num_patches if ex.key is not None else 0
    return k + len(ex.ids) <= bundle.lm_cfg.context_len


def response_loss(
    bundle: ModelBundle, batch: Sequence[EncodedExample], slides: SlideCache, include_eos: bool = True
) -> Tensor:
    """Cross-entropy averaged over every predicted response token in the batch."""
    hidden_rows, labels = [], []
    for ex in batch:
        prefix = image_prefix(bundle, slides(ex.key), ex.key) if ex.key is not None else None
        k = 0 if prefix is None else prefix.shape[0]
        pos = target_positions(ex, include_eos)
        if not pos:
            continue
        h = lm_hidden(bundle, prefix, ex.ids)
        hidden_rows.append(h[np.asarray([k + p - 1 for p in pos])])
        labels += [ex.ids[p] for p in pos]
    if not hidden_rows:
        raise DataError("batch has no response tokens")
    h = hidden_rows[0] if len(hidden_rows) == 1 else ag.concat(hidden_rows, axis=0)
    return ag.cross_entropy(bundle.linear(h, "lm.head"), labels)


def _filter(bundle: ModelBundle, examples: list[EncodedExample]) -> tuple[list[EncodedExample], int]:
    kept = [ex for ex in examples if fits_context(bundle, ex)]
    skipped = len(examples) - len(kept)
    if skipped:
        warnings.warn(f"skipped {skipped} example(s) longer than the context window", stacklevel=3)
    return kept, skipped


def stage2_examples(
    qas: Sequence[QAPair], corpus: Corpus, vocab: Vocab, template: str = DEFAULT_TEMPLATE, text_only: bool = True
) -> list[EncodedExample]:
    """Slide+QA examples, plus text-only transcript+QA copies when ``text_only``."""
    examples = encode_corpus(qas, corpus, vocab, template, with_image=True)
    if text_only:
        examples += encode_corpus(qas, corpus, vocab, template, with_image=False)
    return examples


def run_stage2(
    bundle: ModelBundle,
    examples: Sequence[EncodedExample],
    config: StageConfig | None = None,
    trainable: str = "adapter+lm",
    include_eos: bool = True,
    out_dir: str | os.PathLike | None = None,
) -> StageResult:
    """Instruction tuning on response tokens; vision stays frozen."""
    config = config or StageConfig.defaults(2)
    kept, skipped = _filter(bundle, list(examples))
    freeze_for_stage(bundle, 2, trainable)
    slides = SlideCache(bundle)
    records, epochs = optimize(bundle, kept, lambda b: response_loss(bundle, b, slides, include_eos), config)
    result = StageResult(2, records, epochs, skipped)
    if out_dir is not None:
        out = Path(out_dir)
        result.checkpoint = save_checkpoint(bundle, out / "stage2.svqe")
        write_step_log(records, out / "stage2_log.csv")
    return result


def run_stage3(
    bundle: ModelBundle,
    examples: Sequence[EncodedExample],
    config: StageConfig | None = None,
    lora_config: LoraConfig | None = None,
    include_eos: bool = True,
    out_dir: str | os.PathLike | None = None,
    merge: bool = True,
) -> StageResult:
    """LoRA fine-tuning (base weights frozen), then merge into the bundle.

    Writes ``stage3_adapter.svqe`` (factors only) and ``stage3_merged.svqe``
    when ``out_dir`` is given.
    """
    config = config or StageConfig.defaults(3)
    lora_config = lora_config or LoraConfig()
    kept, skipped = _filter(bundle, [ex for ex in examples if ex.key is not None])
    state = lora_mod.attach(bundle, lora_config.targets, lora_config.rank, lora_config.alpha, lora_config.seed)
    slides = SlideCache(bundle)
    scale = {
        name: lora_config.lr / config.learning_rate
        for name, _ in trainable_params(bundle)
        if name.startswith("lora.")
    }
    records, epochs = optimize(bundle, kept, lambda b: response_loss(bundle, b, slides, include_eos), config, scale)
    result = StageResult(3, records, epochs, skipped, peft=state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        result.adapter_checkpoint = write_tensors(out / "stage3_adapter.svqe", lora_mod.adapter_tensors(state))
        write_step_log(records, out / "stage3_log.csv")
    if merge:
        lora_mod.merge(state)
        if out is not None:
            result.checkpoint = save_checkpoint(bundle, out / "stage3_merged.svqe")
    return result


# -- inference -----------------------------------------------------------------------------

def answer(bundle: ModelBundle, ex: EncodedExample, slides: SlideCache, max_new: int = 64) -> list[int]:
    """Greedy continuation of the example's prompt (slide prefix + template up to the response)."""
    from .models import generate

    with no_grad():
        prefix = image_prefix(bundle, slides(ex.key), ex.key) if ex.key is not None else None
    return generate(bundle, prefix, ex.prompt_ids, max_new)
