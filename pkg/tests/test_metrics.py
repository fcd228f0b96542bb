import json
import math
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

import oracles
from vqelab.metrics import (
    COLUMNS,
    AlignmentError,
    DataError,
    IdfTable,
    bleu,
    cider,
    cosine_tfidf,
    evaluate_corpus,
    lcs_length,
    meteor,
    min_chunk_alignment,
    rouge_l,
    rouge_n,
    score_pairs,
    tokenize_eval,
    write_id_text,
)

DATA = Path(__file__).parent / "data"
words = st.lists(st.sampled_from(["a", "b", "c", "the", "cat", "sat"]), max_size=9)


def test_tokenizer_examples():
    assert tokenize_eval("The cat, sat.") == ["the", "cat", "sat"]
    assert tokenize_eval("") == []
    assert tokenize_eval("K-Nearest Neighbor") == ["k-nearest", "neighbor"]
    assert tokenize_eval("«Quoted»  ... (x)") == ["quoted", "x"]


@given(st.text())
def test_tokenizer_no_empty_tokens(text):
    toks = tokenize_eval(text)
    assert all(toks) and toks == tokenize_eval(text)
    assert all(t == t.lower() for t in toks)


def test_rouge_examples():
    r = rouge_n(["the", "cat"], ["the", "cat", "sat"], 1)
    assert (r.precision, r.recall) == (1.0, pytest.approx(2 / 3)) and r.f1 == pytest.approx(0.8)
    assert rouge_n(list("abc"), list("abd"), 2).f1 == pytest.approx(0.5)
    assert rouge_l(list("abcd"), list("acbd")).f1 == pytest.approx(0.75)
    assert rouge_l(list("ab"), list("cd")).f1 == 0.0
    assert rouge_n([], ["a"], 1).f1 == 0.0


def test_bleu_examples():
    assert bleu(list("abcd"), list("abcd")) == pytest.approx(1.0)
    assert bleu([], ["a"]) == 0.0
    assert bleu(["the", "cat"], ["the", "cat", "sat"]) == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_meteor_examples():
    assert meteor(list("abc"), list("abc")) == pytest.approx(1 - 0.5 / 27)
    assert meteor(list("ab"), list("cd")) == 0.0
    assert meteor(["b", "a"], ["a", "b"]) == pytest.approx(0.5)


def test_meteor_prefers_fewest_chunks():
    # greedy left-to-right would align the first "a" to ref[0] and split the run
    assert min_chunk_alignment(["a", "b"], ["a", "x", "a", "b"]) == (2, 1)


def test_cider_examples():
    pairs = [(list("abcd"), list("abcd")), (list("x"), list("efgh"))]
    assert cider(pairs) == [pytest.approx(10.0), 0.0]
    short = [(["a", "b"], ["a", "b"]), (["z"], ["y"])]
    assert cider(short)[0] == pytest.approx(10 * 2 / 4)
    assert cider([(list("ab"), list("ab"))]) == [0.0]
    with pytest.raises(DataError):
        cider([])


def test_cosine_examples():
    assert cosine_tfidf(["a", "b"], ["a", "c"], lambda t: 1.0) == pytest.approx(0.5)
    idf = IdfTable.fit([["a", "b"], ["c"]])
    assert cosine_tfidf(["a", "b"], ["a", "b"], idf) == pytest.approx(1.0)
    assert cosine_tfidf(["a"], ["c"], idf) == 0.0


@given(words, words)
def test_ranges(c, r):
    for v in (rouge_n(c, r, 1).f1, rouge_n(c, r, 2).f1, rouge_l(c, r).f1, bleu(c, r), meteor(c, r),
              cosine_tfidf(c, r, IdfTable.fit([r]))):
        assert 0.0 <= v <= 1.0
    assert 0.0 <= cider([(c, r), (r, c)])[0] <= 10.0


@given(st.text(max_size=40), st.text(max_size=40))
def test_ranges_on_arbitrary_text(a, b):
    rep = score_pairs(["1", "2"], [a, b], [b, a])
    for row in rep.per_pair:
        for k, v in row.items():
            assert 0.0 <= v <= (10.0 if k == "cider" else 1.0)


@given(words.filter(bool))
def test_identity(c):
    assert rouge_n(c, c, 1).f1 == pytest.approx(1.0)
    assert rouge_l(c, c).f1 == pytest.approx(1.0)
    assert bleu(c, c) == pytest.approx(1.0)
    m = len(c)
    assert meteor(c, c) == pytest.approx(1.0 - 0.5 * (1 / m) ** 3, rel=1e-12)
    if len(c) > 1:
        assert rouge_n(c, c, 2).f1 == pytest.approx(1.0)


@given(words, words)
def test_symmetry(c, r):
    a, b = rouge_n(c, r, 1), rouge_n(r, c, 1)
    assert (a.precision, a.recall, a.f1) == pytest.approx((b.recall, b.precision, b.f1))
    a, b = rouge_l(c, r), rouge_l(r, c)
    assert (a.precision, a.recall) == pytest.approx((b.recall, b.precision))
    idf = IdfTable.fit([c, r])
    assert cosine_tfidf(c, r, idf) == pytest.approx(cosine_tfidf(r, c, idf))


def test_lcs_exhaustive_small():
    seqs = list(oracles.all_sequences("abc", 8))
    # all pairs of lengths <= 4 exhaustively, plus every length <= 8 against a sample
    small = [s for s in seqs if len(s) <= 4]
    for a in small:
        for b in small:
            assert lcs_length(a, b) == oracles.lcs(a, b)
    import random

    rnd = random.Random(0)
    for a in seqs:
        b = rnd.choice(seqs)
        assert lcs_length(a, b) == oracles.lcs(a, b)


@given(words, words)
def test_meteor_matches_brute_force(c, r):
    assert meteor(c, r) == pytest.approx(oracles.meteor(c, r), abs=1e-12)


def test_golden_fixture():
    rows = [json.loads(line) for line in (DATA / "golden_pairs.jsonl").read_text().splitlines() if line]
    golden = json.loads((DATA / "golden_report.json").read_text())
    assert len(rows) == 20
    rep = score_pairs([r["id"] for r in rows], [r["cand"] for r in rows], [r["ref"] for r in rows])
    for pid, vals in zip(rep.ids, rep.per_pair):
        for k, v in vals.items():
            assert v == pytest.approx(golden[pid][k], abs=1e-6), (pid, k)


def _write_pairs(tmp_path, preds, refs):
    return write_id_text(tmp_path / "p.jsonl", preds), write_id_text(tmp_path / "r.jsonl", refs)


def test_evaluate_identity_corpus(tmp_path):
    refs = {f"q{i}": t for i, t in enumerate([
        "gradient descent minimizes loss", "trees split nodes by entropy", "kernels map inputs",
        "clusters have centroids", "boosting adds weak learners"])}
    report = evaluate_corpus(*_write_pairs(tmp_path, refs, refs), out_dir=tmp_path / "out")
    for k in ("rouge1", "rouge2", "rougeL", "bleu", "cosine"):
        assert report.means[k] == pytest.approx(1.0)
    assert report.means["meteor"] < 1.0
    header = (tmp_path / "out" / "report.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["Rouge-1", "Rouge-2", "Rouge-L", "COSINE", "BLEU", "CIDEr", "METEOR"]
    assert [n for _, n in COLUMNS] == header[:7] and header[7] == "CIDEr/10"
    data = json.loads((tmp_path / "out" / "report.json").read_text())
    assert data["count"] == 5 and len(data["pairs"]) == 5


def test_empty_predictions(tmp_path):
    refs = {"a": "some answer", "b": "other answer"}
    report = evaluate_corpus(*_write_pairs(tmp_path, {"a": "", "b": ""}, refs))
    assert all(v == 0.0 for row in report.per_pair for v in row.values())


def test_alignment_error_lists_ids(tmp_path):
    with pytest.raises(AlignmentError) as exc:
        evaluate_corpus(*_write_pairs(tmp_path, {"a": "x", "z": "y"}, {"a": "x", "b": "y"}))
    assert exc.value.missing_predictions == ["b"] and exc.value.missing_references == ["z"]


@given(st.lists(st.tuples(st.text(max_size=20), st.text(max_size=20)), min_size=1, max_size=8))
def test_mean_times_count_equals_sum(pairs):
    rep = score_pairs([str(i) for i in range(len(pairs))], [a for a, _ in pairs], [b for _, b in pairs])
    for k, mean in rep.means.items():
        total = math.fsum(p[k] for p in rep.per_pair)
        assert mean * rep.count == pytest.approx(total, rel=2e-16, abs=1e-300)
