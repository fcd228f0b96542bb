"""Run-directory orchestration shared by the CLI and end-to-end tests.

Each stage reads the previous stage's directory and writes into a new one:

    stage 1 -> stage1.svqe, stage1_log.csv, vocab.json, config.txt
    stage 2 -> stage2.svqe, stage2_log.csv
    stage 3 -> stage3_adapter.svqe, stage3_merged.svqe, stage3_log.csv
    eval    -> predictions.jsonl, references.jsonl, report.csv, report.json
"""

from __future__ import annotations

import hashlib
import os
import shutil
import time
from pathlib import Path
from typing import Sequence

from . import lora as lora_mod
from .checkpoint import load_checkpoint, read_tensors
from .config import RunConfig
from .dataset import Corpus, QAPair, Vocab, build_vocab, encode_example, split_by_week
from .metrics import MetricReport, evaluate_corpus, read_id_text, write_id_text
from .models import ModelBundle
from .training import (
    SlideCache,
    StageResult,
    answer,
    encode_corpus,
    pretrain_vision,
    run_stage1,
    run_stage2,
    run_stage3,
    stage2_examples,
)

CHECKPOINTS = {1: "stage1.svqe", 2: "stage2.svqe", 3: "stage3_merged.svqe"}
ADAPTER_FILE = "stage3_adapter.svqe"
VOCAB_FILE = "vocab.json"


class DependencyError(RuntimeError):
    pass


class CompatibilityError(ValueError):
    pass


def new_run_dir(root: str | os.PathLike, label: str) -> Path:
    """Fresh ``<root>/<label>-<timestamp>[-n]``; never reuses an existing directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{label}-{stamp}"
    path, n = base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path = Path(f"{base}-{n}")
            n += 1


def require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"{what} not found: expected {path}")
    return path


def train_corpus(corpus: Corpus, cfg: RunConfig) -> Corpus:
    split = split_by_week(corpus, cfg.train_weeks)
    weeks = set(split.train_weeks)
    return Corpus(qa=split.train, transcripts=[t for t in corpus.transcripts if t.week in weeks])


def split_qas(corpus: Corpus, cfg: RunConfig, split: str) -> list[QAPair]:
    parts = split_by_week(corpus, cfg.train_weeks)
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    return parts.train if split == "train" else parts.test


def load_vocab(run: Path) -> Vocab:
    return Vocab.load(require(run / VOCAB_FILE, "vocabulary"))


def train_stage(
    stage: int, corpus: Corpus, cfg: RunConfig, out_dir: str | os.PathLike, prev_dir: str | os.PathLike | None = None
) -> StageResult:
    """Run one stage into ``out_dir``; stages 2 and 3 start from ``prev_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    data = train_corpus(corpus, cfg)
    if stage == 1:
        vocab = build_vocab(data, cfg.vocab_size, cfg.template)
        bundle = ModelBundle(cfg.vision(), cfg.lm(len(vocab)), seed=cfg.seed, dtype=cfg.np_dtype,
                             pooling=cfg.pooling)
        if cfg.vision_pretrain_steps:
            pretrain_vision(bundle, data, vocab, cfg.vision_pretrain_steps, seed=cfg.seed)
        vocab.save(out / VOCAB_FILE)
        return run_stage1(bundle, data, cfg.stage(1), vocab, cfg.stage1_per_patch, out)
    if stage not in (2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if prev_dir is None:
        raise DependencyError(f"stage {stage} needs the stage {stage - 1} run directory (--from)")
    prev = Path(prev_dir)
    bundle = load_checkpoint(require(prev / CHECKPOINTS[stage - 1], f"stage {stage - 1} checkpoint"))
    vocab = load_vocab(prev)
    check_compatible(bundle, vocab)
    shutil.copyfile(prev / VOCAB_FILE, out / VOCAB_FILE)
    if stage == 2:
        examples = stage2_examples(data.qa, data, vocab, cfg.template, cfg.stage2_text_only)
        return run_stage2(bundle, examples, cfg.stage(2), cfg.stage2_trainable, out_dir=out)
    examples = encode_corpus(data.qa, data, vocab, cfg.template)
    return run_stage3(bundle, examples, cfg.stage(3), cfg.lora(), out_dir=out)


def merge_adapter(base_path: str | os.PathLike, adapter_path: str | os.PathLike) -> ModelBundle:
    """Rebuild a merged bundle from a base checkpoint and an adapter-only file."""
    bundle = load_checkpoint(require(Path(base_path), "base checkpoint"))
    tensors = read_tensors(require(Path(adapter_path), "adapter checkpoint"))
    targets = sorted({k[len("lora."):-len(".A")] for k in tensors if k.endswith(".A")})
    if not targets:
        raise CompatibilityError(f"{adapter_path} holds no LoRA factors")
    for t in targets:
        rank = tensors[f"lora.{t}.A"].shape[0]
        alpha = float(tensors[f"lora.{t}.alpha"])
        state = lora_mod.attach(bundle, t, rank, alpha)
        lora_mod.load_factors(state, tensors)
        lora_mod.merge(state)
    return bundle


def check_compatible(bundle: ModelBundle, vocab: Vocab) -> None:
    if len(vocab) != bundle.lm_cfg.vocab_size:
        raise CompatibilityError(
            f"vocabulary has {len(vocab)} tokens but the checkpoint expects {bundle.lm_cfg.vocab_size}"
        )


def generate_answers(
    bundle: ModelBundle, vocab: Vocab, qas: Sequence[QAPair], corpus: Corpus, cfg: RunConfig
) -> dict[str, str]:
    """Greedy answers keyed by QA uid."""
    check_compatible(bundle, vocab)
    slides = SlideCache(bundle)
    out = {}
    limit = bundle.lm_cfg.context_len - bundle.vision_cfg.num_patches
    for q in qas:
        tr = corpus.transcript(q.key) if q.key in corpus.slide_index else None
        ex = encode_example(q, tr, vocab, cfg.template)
        prompt = ex.prompt_ids
        if len(prompt) >= limit:
            out[q.uid] = ""
            continue
        ids = answer(bundle, ex, slides, min(cfg.max_new_tokens, limit - len(prompt)))
        out[q.uid] = vocab.decode(ids)
    return out


def evaluate_run(
    corpus: Corpus,
    cfg: RunConfig,
    out_dir: str | os.PathLike,
    checkpoint: str | os.PathLike | None = None,
    vocab_path: str | os.PathLike | None = None,
    split: str = "test",
    predictions: str | os.PathLike | None = None,
    normalize_cider: bool = True,
) -> MetricReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    qas = split_qas(corpus, cfg, split)
    refs = {q.uid: q.response for q in qas}
    ref_path = write_id_text(out / "references.jsonl", refs)
    if predictions is None:
        if checkpoint is None or vocab_path is None:
            raise DependencyError("eval needs a checkpoint and vocabulary, or --predictions")
        bundle = load_checkpoint(require(Path(checkpoint), "merged checkpoint"))
        vocab = Vocab.load(require(Path(vocab_path), "vocabulary"))
        pred_path = write_id_text(out / "predictions.jsonl", generate_answers(bundle, vocab, qas, corpus, cfg))
    else:
        pred_path = Path(predictions)
        read_id_text(pred_path)
    return evaluate_corpus(pred_path, ref_path, out, normalize_cider)


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
