import json

import pytest

from vqelab.cli import main


@pytest.fixture
def corpus_dir(tmp_path):
    assert main(["synth", "--weeks", "14", "--pages", "5", "--qas", "10", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d"


def _data(d):
    return ["--qa", str(d / "qa.jsonl"), "--transcripts", str(d / "transcripts.jsonl")]


def test_synth_validate_stats(corpus_dir, tmp_path, capsys):
    assert sum(1 for _ in open(corpus_dir / "qa.jsonl")) == 700
    assert main(["validate", *_data(corpus_dir)]) == 0
    assert main(["stats", *_data(corpus_dir), "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "stats.csv").read_text().splitlines()
    assert lines[-1].startswith("total,700,70,")


def test_validate_failure_exit_2(corpus_dir, capsys):
    qa = corpus_dir / "qa.jsonl"
    rows = qa.read_text().splitlines()
    bad = json.loads(rows[3])
    bad["category"] = "gossip"
    rows[3] = json.dumps(bad)
    qa.write_text("\n".join(rows) + "\n")
    assert main(["validate", *_data(corpus_dir)]) == 2
    assert "qa.jsonl:4" in capsys.readouterr().err


def test_stage_dependency_errors(corpus_dir, tmp_path, capsys):
    assert main(["train", "--stage", "3", *_data(corpus_dir), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--stage", "2", *_data(corpus_dir), "--out", str(tmp_path / "r"),
                 "--from", str(tmp_path)]) == 2
    assert "stage1.svqe" in capsys.readouterr().err


def test_unknown_config_key(corpus_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 3\n")
    assert main(["train", "--stage", "1", "--config", str(cfg), *_data(corpus_dir), "--out", str(tmp_path)]) == 2


def test_eval_with_existing_predictions(corpus_dir, tmp_path, capsys):
    from vqelab.dataset import load_corpus, split_by_week

    test = split_by_week(load_corpus(corpus_dir / "qa.jsonl", corpus_dir / "transcripts.jsonl")).test
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"id": q.uid, "text": q.response}) + "\n" for q in test))
    assert main(["eval", *_data(corpus_dir), "--predictions", str(preds), "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "| Rouge-1 | Rouge-2 | Rouge-L | COSINE | BLEU | CIDEr | METEOR |" in out
    run = next((tmp_path / "e").iterdir())
    assert json.loads((run / "report.json").read_text())["means"]["rouge1"] == pytest.approx(1.0)
    assert main(["report", "--from", str(run)]) == 0


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seeds", "2", "--model-seeds", "1"]) == 0
    assert "worst relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "1", "--model-seeds", "1", "--break-case", "softmax"]) != 0


def test_run_dirs_never_reused(tmp_path):
    from vqelab.pipeline import new_run_dir

    a, b = new_run_dir(tmp_path, "x"), new_run_dir(tmp_path, "x")
    assert a != b and a.is_dir() and b.is_dir()
