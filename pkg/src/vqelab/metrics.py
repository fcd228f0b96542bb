"""Answer-quality metrics: ROUGE-1/2/L, BLEU, METEOR (exact match), CIDEr, TF-IDF cosine.

All metrics are single-reference and operate on :func:`tokenize_eval` output.
"""

from __future__ import annotations

import csv
import json
import math
import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

METRICS = ("rouge1", "rouge2", "rougeL", "bleu", "meteor", "cider", "cosine")
# Report column order and display names.
COLUMNS = (
    ("rouge1", "Rouge-1"),
    ("rouge2", "Rouge-2"),
    ("rougeL", "Rouge-L"),
    ("cosine", "COSINE"),
    ("bleu", "BLEU"),
    ("cider", "CIDEr"),
    ("meteor", "METEOR"),
)
CIDER_SCALE = 10.0


class AlignmentError(ValueError):
    def __init__(self, missing_predictions: Sequence[str], missing_references: Sequence[str], message: str = "") -> None:
        self.missing_predictions = list(missing_predictions)
        self.missing_references = list(missing_references)
        super().__init__(
            message
            or f"ids missing from predictions: {self.missing_predictions}; "
            f"ids missing from references: {self.missing_references}"
        )


class DataError(ValueError):
    pass


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize_eval(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for tok in text.lower().split():
        i, j = 0, len(tok)
        while i < j and _is_punct(tok[i]):
            i += 1
        while j > i and _is_punct(tok[j - 1]):
            j -= 1
        if i < j:
            out.append(tok[i:j])
    return out


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(overlap: float, n_cand: int, n_ref: int, beta: float = 1.0) -> PRF:
    # Either side without units -> all zero.
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return PRF(0.0, 0.0, 0.0)
    p, r = overlap / n_cand, overlap / n_ref
    b2 = beta * beta
    return PRF(p, r, (1 + b2) * p * r / (r + b2 * p))


def rouge_n(cand: Sequence[str], ref: Sequence[str], n: int = 1) -> PRF:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    c, r = ngrams(cand, n), ngrams(ref, n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Sequence[str], ref: Sequence[str], beta: float = 1.0) -> PRF:
    return _prf(lcs_length(cand, ref), len(cand), len(ref), beta)


def bleu(cand: Sequence[str], ref: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU over orders 1..min(max_n, |cand|).

    Orders n >= 2 with no clipped match use add-one smoothing; no unigram
    match gives 0.
    """
    if not cand or not ref:
        return 0.0
    orders = min(max_n, len(cand))
    log_sum = 0.0
    for n in range(1, orders + 1):
        c = ngrams(cand, n)
        total = sum(c.values())
        match = sum((c & ngrams(ref, n)).values())
        if match == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_sum += math.log(p)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return min(1.0, max(0.0, bp * math.exp(log_sum / orders)))


# -- METEOR ---------------------------------------------------------------------------------

def _max_matches(cand: Sequence[str], ref: Sequence[str]) -> int:
    return sum((Counter(cand) & Counter(ref)).values())


def _greedy_alignment(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    used: set[int] = set()
    pairs = []
    prev = None
    for i, tok in enumerate(cand):
        options = [j for j, r in enumerate(ref) if r == tok and j not in used]
        if not options:
            prev = None
            continue
        j = prev + 1 if prev is not None and prev + 1 in options else options[0]
        used.add(j)
        pairs.append((i, j))
        prev = j
    return pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of alignment pairs contiguous in both sequences (pairs sorted by candidate index)."""
    chunks = 0
    last = None
    for i, j in sorted(pairs):
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def min_chunk_alignment(cand: Sequence[str], ref: Sequence[str], budget: int = 50_000) -> tuple[int, int]:
    """(matches, chunks) for a maximum exact alignment with the fewest chunks.

    Exhaustive memoised search; falls back to a greedy alignment when the
    state budget is exhausted.
    """
    m = _max_matches(cand, ref)
    if m == 0:
        return 0, 0
    quota = Counter(cand) & Counter(ref)
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    # Occurrences of each token in cand[i:], to decide whether skipping is still feasible.
    remaining = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        remaining[i] = remaining[i + 1].copy()
        remaining[i][cand[i]] += 1
    memo: dict = {}
    visited = 0

    class Budget(Exception):
        pass

    def best(i: int, used: int, prev: int, left: tuple) -> int:
        nonlocal visited
        if i == len(cand):
            return 0
        key = (i, used, prev)
        if key in memo:
            return memo[key]
        visited += 1
        if visited > budget:
            raise Budget
        tok = cand[i]
        need = dict(left).get(tok, 0)
        result = math.inf
        if need < remaining[i][tok]:
            result = best(i + 1, used, -1, left)
        if need > 0:
            nl = tuple((t, c - 1 if t == tok else c) for t, c in left)
            for j in positions[tok]:
                if used >> j & 1:
                    continue
                cost = 0 if prev >= 0 and j == prev + 1 else 1
                result = min(result, cost + best(i + 1, used | 1 << j, j, nl))
        memo[key] = result
        return result

    try:
        chunks = best(0, 0, -1, tuple(sorted(quota.items())))
    except Budget:
        pairs = _greedy_alignment(cand, ref)
        return len(pairs), count_chunks(pairs)
    return m, int(chunks)


def meteor(cand: Sequence[str], ref: Sequence[str]) -> float:
    """Exact-match METEOR: F = 10PR/(R+9P), penalty 0.5 (chunks/m)^3."""
    m, chunks = min_chunk_alignment(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f = 10 * p * r / (r + 9 * p)
    return min(1.0, max(0.0, f * (1.0 - 0.5 * (chunks / m) ** 3)))


# -- TF-IDF metrics -------------------------------------------------------------------------

def _cos(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    return min(1.0, max(0.0, dot / (na * nb)))


def cider(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], max_n: int = 4) -> list[float]:
    """Plain CIDEr per pair, x10 scale; document frequencies come from the references."""
    if not pairs:
        raise DataError("CIDEr needs at least one pair")
    n_docs = len(pairs)
    scores = [0.0] * n_docs
    for n in range(1, max_n + 1):
        ref_grams = [ngrams(r, n) for _, r in pairs]
        df: Counter = Counter()
        for g in ref_grams:
            df.update(g.keys())

        def vec(counts: Counter) -> dict:
            return {k: c * math.log(n_docs / max(1, df[k])) for k, c in counts.items()}

        for idx, (c, _) in enumerate(pairs):
            scores[idx] += _cos(vec(ngrams(c, n)), vec(ref_grams[idx]))
    return [min(CIDER_SCALE, max(0.0, CIDER_SCALE * s / max_n)) for s in scores]


@dataclass
class IdfTable:
    """Smoothed IDF, ln((1 + N) / (1 + df)) + 1, over a document set."""

    n_docs: int
    df: dict[str, int]

    @classmethod
    def fit(cls, docs: Sequence[Sequence[str]]) -> "IdfTable":
        df: Counter = Counter()
        for d in docs:
            df.update(set(d))
        return cls(len(docs), dict(df))

    def __call__(self, token: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(token, 0))) + 1.0


def cosine_tfidf(cand: Sequence[str], ref: Sequence[str], corpus_idf) -> float:
    """Cosine of unigram TF-IDF vectors; ``corpus_idf`` maps a token to its weight."""
    idf = corpus_idf if callable(corpus_idf) else (lambda t: corpus_idf.get(t, 0.0))
    a = {t: c * idf(t) for t, c in Counter(cand).items()}
    b = {t: c * idf(t) for t, c in Counter(ref).items()}
    return _cos(a, b)


# -- corpus evaluation ----------------------------------------------------------------------

@dataclass
class MetricReport:
    ids: list[str]
    per_pair: list[dict[str, float]]
    means: dict[str, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ids)

    def header(self, normalize_cider: bool = True) -> list[str]:
        cols = [name for _, name in COLUMNS]
        return cols + ["CIDEr/10"] if normalize_cider else cols

    def row(self, normalize_cider: bool = True) -> list[float]:
        vals = [self.means[k] for k, _ in COLUMNS]
        return vals + [self.means["cider"] / CIDER_SCALE] if normalize_cider else vals

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "means": self.means,
            "pairs": [{"id": i, **vals} for i, vals in zip(self.ids, self.per_pair)],
        }

    def write(self, out_dir: str | os.PathLike, normalize_cider: bool = True) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "report.csv", out / "report.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header(normalize_cider))
            w.writerow([repr(v) for v in self.row(normalize_cider)])
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path, json_path


def score_pairs(ids: Sequence[str], candidates: Sequence[str], references: Sequence[str]) -> MetricReport:
    """All seven metrics for aligned candidate/reference strings."""
    if not ids:
        raise DataError("no pairs to evaluate")
    cands = [tokenize_eval(c) for c in candidates]
    refs = [tokenize_eval(r) for r in references]
    idf = IdfTable.fit(refs)
    cider_scores = cider(list(zip(cands, refs)))
    per_pair = []
    for c, r, cd in zip(cands, refs, cider_scores):
        per_pair.append({
            "rouge1": rouge_n(c, r, 1).f1,
            "rouge2": rouge_n(c, r, 2).f1,
            "rougeL": rouge_l(c, r).f1,
            "bleu": bleu(c, r),
            "meteor": meteor(c, r),
            "cider": cd,
            "cosine": cosine_tfidf(c, r, idf),
        })
    means = {k: math.fsum(p[k] for p in per_pair) / len(per_pair) for k in METRICS}
    return MetricReport(list(ids), per_pair, means)


def read_id_text(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key, text = str(obj["id"]), obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: expected an object with id and text ({exc})") from None
            if not isinstance(text, str):
                raise DataError(f"{path}:{lineno}: text must be a string")
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate id {key!r}")
            out[key] = text
    return out


def write_id_text(path: str | os.PathLike, rows: dict[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in rows.items():
            fh.write(json.dumps({"id": k, "text": v}, ensure_ascii=False) + "\n")
    return path


def evaluate_corpus(
    predictions_path: str | os.PathLike,
    references_path: str | os.PathLike,
    out_dir: str | os.PathLike | None = None,
    normalize_cider: bool = True,
) -> MetricReport:
    """Score id-aligned prediction/reference JSON-lines files, in reference order."""
    preds = read_id_text(predictions_path)
    refs = read_id_text(references_path)
    missing_p = [k for k in refs if k not in preds]
    missing_r = [k for k in preds if k not in refs]
    if missing_p or missing_r:
        raise AlignmentError(missing_p, missing_r)
    ids = list(refs)
    report = score_pairs(ids, [preds[k] for k in ids], [refs[k] for k in ids])
    if out_dir is not None:
        report.write(out_dir, normalize_cider)
    return report
