import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import TINY_LM, TINY_VISION
from vqelab.autograd import Tensor
from vqelab.dataset import EncodedExample, build_vocab
from vqelab.models import LMConfig, ModelBundle
from vqelab.synthetic import generate_synthetic_corpus
from vqelab.training import (
    AdamWState,
    AlignmentBatch,
    GradientError,
    LoraConfig,
    SlideCache,
    StageConfig,
    adamw_step,
    encode_corpus,
    fit_alignment,
    lr_at,
    response_loss,
    run_stage1,
    run_stage2,
    run_stage3,
    target_positions,
    warmup_steps,
)


def test_stage_defaults():
    assert [(c.batch_size, c.learning_rate, c.epochs) for c in map(StageConfig.defaults, (1, 2, 3))] == [
        (256, 1e-3, 2), (128, 2e-5, 2), (128, 2e-4, 10)]
    c = StageConfig.defaults(1)
    assert c.warmup_ratio == 0.03 and c.weight_decay == 0.0
    assert LoraConfig().lr == 2e-5


def test_config_invariants():
    with pytest.raises(ValueError):
        StageConfig(1, 0, 1e-3, 1)
    with pytest.raises(ValueError):
        StageConfig(1, 1, 1e-3, 1, warmup_ratio=1.0)
    with pytest.raises(ValueError):
        StageConfig(4, 1, 1e-3, 1)


def test_adamw_hand_step():
    w = Tensor(np.array([0.0]))
    adamw_step(AdamWState(), {"w": w}, {"w": np.array([1.0])}, 0.1)
    assert w.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)


def test_adamw_zero_grad_no_change():
    w = Tensor(np.array([1.5, -2.0]))
    adamw_step(AdamWState(), {"w": w}, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_adamw_missing_grad_names_param():
    with pytest.raises(GradientError, match="adapter.fc1.weight"):
        adamw_step(AdamWState(), {"adapter.fc1.weight": Tensor(np.zeros(1))}, {}, 0.1)


@given(st.floats(-100, 100), st.floats(0.1, 10))
def test_adamw_no_decay_update_independent_of_theta(theta, g):
    a, b = Tensor(np.array([theta])), Tensor(np.array([0.0]))
    adamw_step(AdamWState(), {"a": a}, {"a": np.array([g])}, 0.01)
    adamw_step(AdamWState(), {"b": b}, {"b": np.array([g])}, 0.01)
    assert a.data[0] - theta == pytest.approx(b.data[0], abs=1e-9)


def test_adamw_decay_term():
    w = Tensor(np.array([2.0]))
    adamw_step(AdamWState(), {"w": w}, {"w": np.zeros(1)}, 0.1, weight_decay=0.5)
    assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_lr_examples():
    c = StageConfig(1, 1, 1e-3, 1)
    T = 1000
    w = warmup_steps(c, T)
    assert w == 30
    assert lr_at(c, 0, T) == 0.0
    assert lr_at(c, w, T) == 1e-3
    assert lr_at(c, T, T) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(c, (w + T) // 2, T) == pytest.approx(0.5e-3, abs=1e-15)
    with pytest.raises(ValueError):
        lr_at(c, T + 1, T)


@given(st.integers(1, 5000), st.floats(0.0, 0.5))
def test_lr_shape(total, ratio):
    c = StageConfig(1, 1, 1.0, 1, warmup_ratio=ratio)
    w = warmup_steps(c, total)
    lrs = [lr_at(c, s, total) for s in range(total + 1)]
    assert all(0.0 <= x <= 1.0 for x in lrs)
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:w], lrs[1:w + 1]))
    assert all(b <= a + 1e-15 for a, b in zip(lrs[w:], lrs[w + 1:]))
    if w < total:
        assert lrs[w] == 1.0


def _micro_corpus():
    return generate_synthetic_corpus(2, 2, 3, seed=5)


def _bundle(vocab_size, seed=0, dtype=np.float32):
    lm = LMConfig(vocab_size=vocab_size, embed_dim=8, layers=1, heads=2, context_len=96, mlp_ratio=2)
    return ModelBundle(TINY_VISION, lm, seed=seed, dtype=dtype)


def test_target_positions_cover_response_and_eos():
    ex = EncodedExample((1, 1), [1, 5, 6, 7, 8, 2], [False, False, False, True, True, False])
    assert target_positions(ex) == [3, 4, 5]
    assert target_positions(ex, include_eos=False) == [3, 4]


def test_prompt_tokens_do_not_enter_loss():
    """Changing prompt-token *labels* (not inputs) leaves the loss unchanged."""
    b = ModelBundle(TINY_VISION, TINY_LM, seed=1, dtype=np.float64)
    slides = SlideCache(b)
    base = EncodedExample(None, [1, 5, 6, 7, 8, 2], [False, False, False, True, True, False])
    loss = response_loss(b, [base], slides).item()
    # manual cross-entropy over predicted positions 3, 4, 5
    from vqelab.models import lm_forward

    logits = lm_forward(b, None, base.ids).data
    lp = logits - logits.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    manual = -np.mean([lp[p - 1, base.ids[p]] for p in (3, 4, 5)])
    assert loss == pytest.approx(manual, rel=1e-12)


def test_stage1_learns_linear_map():
    rng = np.random.default_rng(0)
    b = _bundle(20)
    v = rng.normal(size=(64, TINY_VISION.embed_dim))
    m = rng.normal(size=(TINY_VISION.embed_dim, 8)) * 0.3
    batch = AlignmentBatch(v, v @ m)
    res = fit_alignment(b, batch, StageConfig(1, 8, 1e-2, 24, seed=1))
    assert len(res.epoch_losses) == 24
    assert res.epoch_losses[-1] < 0.1 * res.epoch_losses[0]


def test_alignment_batch_validation():
    with pytest.raises(ValueError):
        AlignmentBatch(np.zeros((3, 4)), np.zeros((2, 4)))


def test_stage1_freeze_discipline_and_outputs(tmp_path):
    c = _micro_corpus()
    vocab = build_vocab(c, 64)
    b = _bundle(len(vocab))
    before = {k: v.data.copy() for k, v in b.params.items()}
    res = run_stage1(b, c, StageConfig(1, 2, 1e-2, 1, max_steps=5), vocab, out_dir=tmp_path)
    for k, v in b.params.items():
        changed = not np.array_equal(v.data, before[k])
        assert changed == k.startswith("adapter."), k
    assert res.checkpoint.exists() and (tmp_path / "stage1_log.csv").read_text().startswith("step,stage,lr,loss")
    assert [s.step for s in res.steps] == [1, 2, 3, 4, 5]


def test_stage1_empty_corpus():
    from vqelab.dataset import Corpus
    from vqelab.training import DataError

    with pytest.raises(DataError):
        run_stage1(_bundle(20), Corpus([], []), StageConfig(1, 2, 1e-2, 1))


def test_stage2_and_stage3_trainable_sets(tmp_path):
    c = _micro_corpus()
    vocab = build_vocab(c, 64)
    b = _bundle(len(vocab))
    ex = encode_corpus(c.qa, c, vocab)
    before = {k: v.data.copy() for k, v in b.params.items()}
    run_stage2(b, ex, StageConfig(2, 2, 1e-3, 1, max_steps=3))
    for k, v in b.params.items():
        if k.startswith("vision."):
            assert np.array_equal(v.data, before[k]), k
    assert not np.array_equal(b.params["lm.head.weight"].data, before["lm.head.weight"])

    mid = {k: v.data.copy() for k, v in b.params.items()}
    res = run_stage3(b, ex, StageConfig(3, 2, 1e-3, 1, max_steps=3), LoraConfig(rank=2, lr=1e-3),
                     out_dir=tmp_path, merge=False)
    for k, v in b.params.items():
        assert np.array_equal(v.data, mid[k]), k
    assert any(layer.B.data.any() for layer in res.peft.layers.values())
    assert res.adapter_checkpoint.exists() and res.checkpoint is None


def test_overlong_examples_skipped_with_warning():
    b = _bundle(20)
    long = EncodedExample((1, 1), [1] + [5] * 100 + [2], [False] + [True] * 100 + [False])
    ok = EncodedExample(None, [1, 5, 6, 2], [False, False, True, False])
    with pytest.warns(UserWarning, match="skipped 1"):
        res = run_stage2(b, [long, ok], StageConfig(2, 2, 1e-3, 1, max_steps=1))
    assert res.skipped == 1


def test_text_only_batch_leaves_adapter_alone():
    b = _bundle(20)
    before = b.params["adapter.fc1.weight"].data.copy()
    ok = EncodedExample(None, [1, 5, 6, 2], [False, False, True, False])
    run_stage2(b, [ok], StageConfig(2, 1, 1e-3, 1, max_steps=2))
    np.testing.assert_array_equal(b.params["adapter.fc1.weight"].data, before)


def test_runs_are_deterministic(tmp_path):
    c = _micro_corpus()
    vocab = build_vocab(c, 64)
    outs = []
    for i in range(2):
        b = _bundle(len(vocab), seed=3)
        ex = encode_corpus(c.qa, c, vocab)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_stage2(b, ex, StageConfig(2, 3, 1e-3, 1, seed=9, max_steps=4))
        outs.append({k: v.data.tobytes() for k, v in b.params.items()})
    assert outs[0] == outs[1]


def test_epoch_count_matches_schedule():
    rng = np.random.default_rng(1)
    b = _bundle(20)
    v = rng.normal(size=(10, TINY_VISION.embed_dim))
    res = fit_alignment(b, AlignmentBatch(v, v[:, :8]), StageConfig(1, 4, 1e-3, 3))
    assert len(res.steps) == 3 * math.ceil(10 / 4)
    assert res.steps[-1].lr == pytest.approx(0.0, abs=1e-18)
