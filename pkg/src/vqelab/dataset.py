"""Lecture QA corpora: schema validation, splitting, statistics and encoding."""

from __future__ import annotations

import csv
import json
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

# Category counts of the full lecture corpus, largest first.
CATEGORY_COUNTS = {
    "closed_qa": 2776,
    "information_extraction": 2122,
    "general_qa": 1125,
    "open_qa": 1083,
    "summarization": 934,
    "brainstorming": 540,
    "classification": 510,
    "creative_writing": 326,
}
CATEGORIES = tuple(CATEGORY_COUNTS)
QA_FIELDS = ("instruction", "context", "response", "category", "week", "page")
CORE_INSTRUCTION = "Can you explain this slide?"
DEFAULT_TEMPLATE = "{context} Question: {instruction} Answer: {response}"
TRAIN_WEEKS = 12

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class ValidationError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None) -> None:
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class MissingFieldError(ValidationError):
    pass


class UnknownCategoryError(ValidationError):
    pass


class DanglingReferenceError(ValidationError):
    pass


class InvalidValueError(ValidationError):
    pass


class DuplicateTranscriptError(ValidationError):
    pass


class SplitError(ValueError):
    pass


class TemplateError(ValueError):
    pass


@dataclass
class QAPair:
    instruction: str
    context: str
    response: str
    category: str
    week: int
    page: int
    uid: str = field(default="", compare=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.week, self.page)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in QA_FIELDS}


@dataclass
class TranscriptEntry:
    week: int
    page: int
    text: str

    @property
    def word_count(self) -> int:
        return len(self.text.split())

    @property
    def key(self) -> tuple[int, int]:
        return (self.week, self.page)

    def to_json(self) -> dict:
        return {"week": self.week, "page": self.page, "text": self.text}


@dataclass
class Corpus:
    qa: list[QAPair]
    transcripts: list[TranscriptEntry]

    def __post_init__(self) -> None:
        self._by_key = {t.key: t for t in self.transcripts}
        if len(self._by_key) != len(self.transcripts):
            seen: set = set()
            for t in self.transcripts:
                if t.key in seen:
                    raise DuplicateTranscriptError(f"duplicate transcript for week {t.week} page {t.page}")
                seen.add(t.key)
        for i, q in enumerate(self.qa):
            if not q.uid:
                q.uid = f"qa-{i:05d}"

    @property
    def slide_index(self) -> set[tuple[int, int]]:
        return set(self._by_key)

    def transcript(self, key: tuple[int, int]) -> TranscriptEntry:
        return self._by_key[key]

    @property
    def weeks(self) -> list[int]:
        return sorted({q.week for q in self.qa} | {t.week for t in self.transcripts})


# -- loading / saving -------------------------------------------------------------

def _read_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"invalid JSON: {exc.msg}", lineno, str(path)) from None
            if not isinstance(obj, dict):
                raise ValidationError("expected a JSON object", lineno, str(path))
            yield lineno, obj


def _int_field(obj: dict, key: str, lineno: int, path: str) -> int:
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise InvalidValueError(f"field {key!r} must be an integer, got {val!r}", lineno, path)
    if val < 1:
        raise InvalidValueError(f"field {key!r} must be >= 1, got {val}", lineno, path)
    return val


def parse_qa(obj: dict, lineno: int | None = None, path: str | None = None) -> QAPair:
    for key in QA_FIELDS:
        if key not in obj:
            raise MissingFieldError(f"missing field {key!r}", lineno, path)
    for key in ("instruction", "context", "response", "category"):
        if not isinstance(obj[key], str):
            raise InvalidValueError(f"field {key!r} must be a string", lineno, path)
    if obj["category"] not in CATEGORY_COUNTS:
        raise UnknownCategoryError(f"unknown category {obj['category']!r}", lineno, path)
    if not obj["instruction"].strip():
        raise InvalidValueError("empty instruction", lineno, path)
    if not obj["response"].strip():
        raise InvalidValueError("empty response", lineno, path)
    return QAPair(
        instruction=obj["instruction"],
        context=obj["context"],
        response=obj["response"],
        category=obj["category"],
        week=_int_field(obj, "week", lineno, path),
        page=_int_field(obj, "page", lineno, path),
    )


def load_corpus(qa_path: str | os.PathLike, transcript_path: str | os.PathLike) -> Corpus:
    """Parse and validate both JSON-lines files; errors carry file and line."""
    tpath = str(transcript_path)
    transcripts: list[TranscriptEntry] = []
    seen: dict[tuple[int, int], int] = {}
    for lineno, obj in _read_jsonl(transcript_path):
        for key in ("week", "page", "text"):
            if key not in obj:
                raise MissingFieldError(f"missing field {key!r}", lineno, tpath)
        if not isinstance(obj["text"], str):
            raise InvalidValueError("field 'text' must be a string", lineno, tpath)
        entry = TranscriptEntry(
            _int_field(obj, "week", lineno, tpath), _int_field(obj, "page", lineno, tpath), obj["text"]
        )
        if entry.key in seen:
            raise DuplicateTranscriptError(
                f"week {entry.week} page {entry.page} already defined on line {seen[entry.key]}", lineno, tpath
            )
        seen[entry.key] = lineno
        transcripts.append(entry)

    qpath = str(qa_path)
    qa: list[QAPair] = []
    for lineno, obj in _read_jsonl(qa_path):
        pair = parse_qa(obj, lineno, qpath)
        if pair.key not in seen:
            raise DanglingReferenceError(
                f"no transcript/slide for week {pair.week} page {pair.page}", lineno, qpath
            )
        qa.append(pair)
    return Corpus(qa=qa, transcripts=transcripts)


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def save_corpus(corpus: Corpus, qa_path: str | os.PathLike, transcript_path: str | os.PathLike) -> None:
    _write_jsonl(Path(qa_path), (q.to_json() for q in corpus.qa))
    _write_jsonl(Path(transcript_path), (t.to_json() for t in corpus.transcripts))


# -- splitting -----------------------------------------------------------------------

@dataclass
class WeekSplit:
    train: list[QAPair]
    test: list[QAPair]
    train_weeks: list[int]
    test_weeks: list[int]


def split_by_week(corpus: Corpus, train_weeks: int = TRAIN_WEEKS) -> WeekSplit:
    """QAs of the first ``train_weeks`` distinct weeks (ascending) train; the rest test."""
    weeks = sorted({q.week for q in corpus.qa})
    if len(weeks) < 2:
        raise SplitError(f"need at least 2 distinct weeks to split, found {len(weeks)}")
    tr_weeks, te_weeks = weeks[:train_weeks], weeks[train_weeks:]
    tr_set = set(tr_weeks)
    train = [q for q in corpus.qa if q.week in tr_set]
    test = [q for q in corpus.qa if q.week not in tr_set]
    if not test:
        warnings.warn(f"corpus has only {len(weeks)} weeks; test split is empty", stacklevel=2)
    return WeekSplit(train, test, tr_weeks, te_weeks)


# -- statistics ------------------------------------------------------------------------

@dataclass
class WeekRow:
    week: int
    qas: int
    transcripts_images: int
    word_count: int


@dataclass
class LengthSummary:
    count: int
    total: int
    maximum: int

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


@dataclass
class WeeklyStats:
    weeks: list[WeekRow]
    total_qas: int
    total_transcripts: int
    total_words: int
    questions: LengthSummary
    answers: LengthSummary
    transcripts: LengthSummary
    categories: dict[str, int]


def _summary(counts: list[int]) -> LengthSummary:
    return LengthSummary(len(counts), sum(counts), max(counts, default=0))


def corpus_stats(corpus: Corpus) -> WeeklyStats:
    """Per-week counts plus word-length summaries (whitespace word counts)."""
    if not corpus.qa and not corpus.transcripts:
        raise ValueError("corpus is empty")
    qa_per_week = Counter(q.week for q in corpus.qa)
    tr_per_week = Counter(t.week for t in corpus.transcripts)
    words_per_week: Counter = Counter()
    for t in corpus.transcripts:
        words_per_week[t.week] += t.word_count
    rows = [
        WeekRow(w, qa_per_week.get(w, 0), tr_per_week.get(w, 0), words_per_week.get(w, 0))
        for w in corpus.weeks
    ]
    return WeeklyStats(
        weeks=rows,
        total_qas=sum(r.qas for r in rows),
        total_transcripts=sum(r.transcripts_images for r in rows),
        total_words=sum(r.word_count for r in rows),
        questions=_summary([len(q.instruction.split()) for q in corpus.qa]),
        answers=_summary([len(q.response.split()) for q in corpus.qa]),
        transcripts=_summary([t.word_count for t in corpus.transcripts]),
        categories={c: n for c, n in Counter(q.category for q in corpus.qa).most_common()},
    )


def write_stats_csv(stats: WeeklyStats, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week", "qas", "transcripts_images", "word_count"])
        for r in stats.weeks:
            w.writerow([r.week, r.qas, r.transcripts_images, r.word_count])
        w.writerow(["total", stats.total_qas, stats.total_transcripts, stats.total_words])
    return path


def write_summary_csv(stats: WeeklyStats, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "mean", "maximum"])
        for label, s in (("transcripts", stats.transcripts), ("questions", stats.questions),
                         ("answers", stats.answers)):
            w.writerow([label, f"{s.mean:.2f}", s.maximum])
    return path


# -- vocabulary and encoding ----------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+(?:[-'.]\w+)*|[^\w\s]")


def tokenize_text(text: str) -> list[str]:
    """Lowercased words (keeping interior - ' .) and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize_text(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = [self.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS) and i < len(self.tokens)]
        return " ".join(words)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def _template_literals(template: str) -> list[str]:
    return [tok for piece in re.split(r"\{\w+\}", template) for tok in tokenize_text(piece)]


def build_vocab(corpus: Corpus, max_size: int = 512, template: str = DEFAULT_TEMPLATE) -> Vocab:
    """Most frequent word-level tokens after the four reserved ids; ties lexicographic."""
    if max_size < 8:
        raise ValueError("max_size must be at least 8")
    counts: Counter = Counter()
    literals = _template_literals(template)
    for q in corpus.qa:
        for text in (q.instruction, q.context, q.response):
            counts.update(tokenize_text(text))
        counts.update(literals)
    for t in corpus.transcripts:
        counts.update(tokenize_text(t.text))
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocab(list(SPECIAL_TOKENS) + keep)


@dataclass
class EncodedExample:
    key: tuple[int, int] | None
    ids: list[int]
    response_mask: list[bool]
    uid: str = ""

    @property
    def prompt_ids(self) -> list[int]:
        """Tokens preceding the first response position."""
        first = self.response_mask.index(True) if any(self.response_mask) else len(self.ids)
        return self.ids[:first]

    @property
    def response_ids(self) -> list[int]:
        return [i for i, m in zip(self.ids, self.response_mask) if m]


_PLACEHOLDERS = ("context", "instruction", "response")


def check_template(template: str) -> None:
    for name in _PLACEHOLDERS:
        if template.count("{" + name + "}") != 1:
            raise TemplateError(f"template must contain {{{name}}} exactly once: {template!r}")
    names = re.findall(r"\{(\w+)\}", template)
    unknown = set(names) - set(_PLACEHOLDERS) - {"transcript"}
    if unknown:
        raise TemplateError(f"unknown template placeholders {sorted(unknown)}")
    if names[-1] != "response":
        raise TemplateError("{response} must be the last placeholder")


def encode_example(
    qa: QAPair,
    transcript: TranscriptEntry | None,
    vocab: Vocab,
    template: str = DEFAULT_TEMPLATE,
    with_image: bool = True,
) -> EncodedExample:
    """bos + expanded template + eos, with a mask over the response tokens only."""
    check_template(template)
    values = {
        "context": qa.context,
        "instruction": qa.instruction,
        "response": qa.response,
        "transcript": transcript.text if transcript is not None else "",
    }
    ids = [BOS]
    mask = [False]
    for piece in re.split(r"(\{\w+\})", template):
        if not piece:
            continue
        m = re.fullmatch(r"\{(\w+)\}", piece)
        text = values[m.group(1)] if m else piece
        toks = vocab.encode(text)
        ids += toks
        mask += [bool(m and m.group(1) == "response")] * len(toks)
    ids.append(EOS)
    mask.append(False)
    return EncodedExample(key=qa.key if with_image else None, ids=ids, response_mask=mask, uid=qa.uid)
