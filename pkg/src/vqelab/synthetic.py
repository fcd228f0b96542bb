"""Deterministic stand-ins for lecture slides and QA corpora."""

from __future__ import annotations

import os

import numpy as np

from .autograd import Tensor
from .dataset import (
    CATEGORY_COUNTS,
    CORE_INSTRUCTION,
    Corpus,
    QAPair,
    TranscriptEntry,
    save_corpus,
)
from .rng import SplitMix64

SLIDE_HEIGHT, SLIDE_WIDTH = 36, 64
HOLIDAY_WEEKS = (12, 13)

TOPICS = {
    1: ("introduction", ["learning", "data", "model", "prediction", "features", "labels"]),
    2: ("preprocessing", ["vectors", "matrices", "normalization", "scaling", "outliers", "missing"]),
    3: ("classification", ["classes", "regression", "targets", "errors", "boundaries", "accuracy"]),
    4: ("logistic", ["sigmoid", "likelihood", "squares", "weights", "bias", "probability"]),
    5: ("components", ["variance", "projection", "eigenvectors", "factors", "loadings", "dimensions"]),
    6: ("factorization", ["ratings", "users", "items", "rank", "embeddings", "reconstruction"]),
    7: ("clustering", ["centroids", "k-means", "distance", "assignments", "clusters", "inertia"]),
    8: ("mixtures", ["gaussians", "means", "covariance", "responsibilities", "expectation", "maximization"]),
    9: ("neighbors", ["k-nearest", "neighbor", "voting", "metric", "neighborhood", "lazy"]),
    10: ("trees", ["splits", "entropy", "gini", "leaves", "depth", "pruning"]),
    11: ("margins", ["support", "vectors", "kernels", "margin", "hinge", "slack"]),
    14: ("transformers", ["patches", "attention", "tokens", "heads", "encoder", "positional"]),
    15: ("ensembles", ["bagging", "boosting", "forests", "stacking", "learners", "votes"]),
    16: ("conclusion", ["review", "summary", "projects", "exam", "topics", "future"]),
}
_EXTRA = ["optimization", "gradient", "training", "testing", "validation", "loss", "samples", "parameters"]


def course_weeks(n: int) -> list[int]:
    """First ``n`` course week labels, skipping the holiday weeks."""
    out, w = [], 1
    while len(out) < n:
        if w not in HOLIDAY_WEEKS:
            out.append(w)
        w += 1
    return out


def slide_seed(week: int, page: int) -> int:
    return week * 65536 + page


def synth_slide(week: int, page: int, height: int = SLIDE_HEIGHT, width: int = SLIDE_WIDTH,
                dtype=np.float32) -> Tensor:
    """Grayscale slide: seeded banded gradient plus a few bright/dark boxes, in [0, 1]."""
    if week < 1 or page < 1:
        raise ValueError(f"week and page must be >= 1, got ({week}, {page})")
    rng = SplitMix64(slide_seed(week, page))
    rows = np.arange(height)[:, None] / max(height - 1, 1)
    cols = np.arange(width)[None, :] / max(width - 1, 1)
    angle = rng.random() * np.pi
    bands = 2 + rng.randint(0, 4)
    phase = rng.random() * 2 * np.pi
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    img = 0.35 + 0.25 * np.sin(2 * np.pi * bands * ramp + phase)
    for _ in range(2 + rng.randint(0, 3)):
        h = rng.randint(3, height // 2)
        w = rng.randint(4, width // 2)
        r0 = rng.randint(0, height - h)
        c0 = rng.randint(0, width - w)
        img[r0:r0 + h, c0:c0 + w] = rng.random()
    return Tensor._wrap(np.clip(img, 0.0, 1.0).astype(dtype))


# -- text generation ---------------------------------------------------------------

def _terms(week: int) -> tuple[str, list[str]]:
    if week in TOPICS:
        return TOPICS[week]
    keys = sorted(TOPICS)
    return TOPICS[keys[week % len(keys)]]


def _transcript(rng: SplitMix64, week: int, page: int) -> str:
    topic, terms = _terms(week)
    a, b, c = (rng.choice(terms) for _ in range(3))
    x = rng.choice(_EXTRA)
    return (
        f"On slide {page} we look at {a} in {topic}. "
        f"The main idea is that {b} and {c} help the {x} of the model."
    )


def _qa_text(rng: SplitMix64, category: str, week: int, page: int, transcript: str) -> tuple[str, str]:
    topic, terms = _terms(week)
    a, b = rng.choice(terms), rng.choice(terms)
    x = rng.choice(_EXTRA)
    if category == "closed_qa":
        return f"What does slide {page} say about {a}?", f"It says {a} supports {x} in {topic}."
    if category == "information_extraction":
        return f"Which terms appear on page {page}?", f"The terms are {a}, {b} and {x}."
    if category == "general_qa":
        return f"Why is {a} important?", f"Because {a} improves {x} when we use {b}."
    if category == "open_qa":
        return f"How would you apply {a}?", f"Apply {a} to {x} and compare it with {b}."
    if category == "summarization":
        return "Summarize this slide.", transcript.split(". ")[0].rstrip(".") + "."
    if category == "brainstorming":
        return f"List ideas related to {a}.", f"Ideas include {b}, {x} and {topic}."
    if category == "classification":
        return f"Is {a} part of {topic}?", f"Yes, {a} belongs to {topic}."
    return f"Write a short line about {a}.", f"{a.capitalize()} guides the {x} like a map."


def generate_synthetic_corpus(
    weeks: int,
    pages_per_week: int,
    qas_per_page: int,
    seed: int = 0,
    qa_path: str | os.PathLike | None = None,
    transcript_path: str | os.PathLike | None = None,
) -> Corpus:
    """Schema-valid corpus; every page's first QA is the core explain-slide question.

    Categories of the remaining QAs follow the full corpus category proportions.
    When paths are given, the corpus is also written as JSON lines.
    """
    if min(weeks, pages_per_week, qas_per_page) < 1:
        raise ValueError("weeks, pages_per_week and qas_per_page must all be >= 1")
    rng = SplitMix64(seed)
    cats = list(CATEGORY_COUNTS)
    weights = [CATEGORY_COUNTS[c] for c in cats]
    qa: list[QAPair] = []
    transcripts: list[TranscriptEntry] = []
    for week in course_weeks(weeks):
        for page in range(1, pages_per_week + 1):
            text = _transcript(rng, week, page)
            transcripts.append(TranscriptEntry(week, page, text))
            qa.append(QAPair(CORE_INSTRUCTION, text, text, "summarization", week, page))
            for _ in range(qas_per_page - 1):
                cat = rng.weighted_choice(cats, weights)
                question, answer = _qa_text(rng, cat, week, page, text)
                qa.append(QAPair(question, text, answer, cat, week, page))
    corpus = Corpus(qa=qa, transcripts=transcripts)
    if qa_path is not None and transcript_path is not None:
        save_corpus(corpus, qa_path, transcript_path)
    return corpus


def corpus_from_weekly_table(rows: list[tuple[int, int, int, int]]) -> Corpus:
    """Build a corpus matching per-week (week, qas, slides, words) counts exactly.

    Words are spread as evenly as possible over each week's transcripts, and
    QAs are dealt round-robin over that week's pages.
    """
    qa: list[QAPair] = []
    transcripts: list[TranscriptEntry] = []
    for week, n_qa, n_slides, n_words in rows:
        base, extra = divmod(n_words, n_slides)
        for page in range(1, n_slides + 1):
            count = base + (1 if page <= extra else 0)
            transcripts.append(TranscriptEntry(week, page, " ".join(["word"] * count)))
        for i in range(n_qa):
            page = i % n_slides + 1
            qa.append(QAPair("What is shown here?", "", "A slide.", "closed_qa", week, page))
    return Corpus(qa=qa, transcripts=transcripts)
