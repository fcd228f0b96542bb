import pytest

from vqelab.config import ConfigFileError, RunConfig, load_config, parse_config


def test_defaults_match_stage_table():
    c = RunConfig()
    assert [(s.batch_size, s.learning_rate, s.epochs) for s in map(c.stage, (1, 2, 3))] == [
        (256, 1e-3, 2), (128, 2e-5, 2), (128, 2e-4, 10)]
    assert c.lora().lr == 2e-5 and c.lora().rank == 8 and c.warmup_ratio == 0.03


def test_parse_and_echo_round_trip(tmp_path):
    c = parse_config("# comment\nseed = 7\nstage2_lr=0.003\nstage2_text_only = false\n\ntemplate = {context} Q: {instruction} A: {response}\n")
    assert (c.seed, c.stage2_lr, c.stage2_text_only) == (7, 0.003, False)
    assert c.template == "{context} Q: {instruction} A: {response}"
    path = c.save(tmp_path / "config.txt")
    assert load_config(path) == c


@pytest.mark.parametrize("text", ["nope = 1", "seed = x", "seed", "stage2_text_only = maybe", "dtype = float16"])
def test_rejections(text):
    with pytest.raises(ConfigFileError):
        parse_config(text)


def test_max_steps_and_clip_zero_mean_off():
    s = RunConfig().stage(1)
    assert s.max_steps is None and s.grad_clip is None
    assert parse_config("stage1_max_steps = 5").stage(1).max_steps == 5
