import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import TINY_LM, TINY_VISION
from vqelab import lora
from vqelab.autograd import ShapeError, Tensor, no_grad
from vqelab.models import ModelBundle, UnknownParameterError, lm_forward, trainable_params


def _bundle(dtype=np.float32, seed=1):
    return ModelBundle(TINY_VISION, TINY_LM, seed=seed, dtype=dtype)


def test_layer_init():
    w = Tensor(np.zeros((6, 4), dtype=np.float32))
    layer = lora.make_layer(w, 2)
    assert layer.A.shape == (2, 4) and layer.B.shape == (6, 2)
    assert not layer.B.data.any()
    assert layer.alpha == 4.0 and layer.scaling == 2.0
    with pytest.raises(ShapeError):
        lora.make_layer(w, 5)
    with pytest.raises(ShapeError):
        lora.make_layer(Tensor(np.zeros(3)), 1)


def test_forward_formula():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 4)))
    layer = lora.make_layer(w, 2, alpha=3.0, rng=rng)
    layer.B.data = rng.normal(size=(3, 2))
    x = rng.normal(size=(5, 4))
    expected = x @ w.data.T + 1.5 * (x @ layer.A.data.T) @ layer.B.data.T
    np.testing.assert_allclose(lora.lora_forward(layer, Tensor(x)).data, expected, rtol=1e-12)
    np.testing.assert_allclose(lora.lora_forward(layer, Tensor(x[0])).data, expected[0], rtol=1e-12)


def test_attach_freezes_base_and_exposes_factors():
    b = _bundle()
    state = lora.attach(b, lora.DEFAULT_TARGETS, r=2)
    names = [n for n, _ in trainable_params(b)]
    assert names and all(n.startswith("lora.") for n in names)
    assert set(names) == set(state.phi)
    assert state.num_trainable() == sum(t.size for t in state.phi.values())
    with pytest.raises(lora.LoraStateError):
        lora.attach(b, "adapter.fc1.weight", r=2)


def test_attach_errors():
    with pytest.raises(UnknownParameterError):
        lora.attach(_bundle(), "no.such.*")
    with pytest.raises(ShapeError):
        lora.attach(_bundle(), "lm.ln_f.gain")


def test_zero_b_is_identity_and_merge_is_bit_identical():
    b = _bundle()
    ids = [1, 5, 6]
    with no_grad():
        before = lm_forward(b, None, ids).data.copy()
    weights = {k: v.data.copy() for k, v in b.params.items()}
    state = lora.attach(b, lora.DEFAULT_TARGETS, r=2)
    with no_grad():
        np.testing.assert_array_equal(lm_forward(b, None, ids).data, before)
    lora.merge(state)
    for k, v in b.params.items():
        np.testing.assert_array_equal(v.data, weights[k])


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_merge_equivalence(seed, rank):
    rng = np.random.default_rng(seed)
    b = _bundle(np.float32, seed)
    state = lora.attach(b, lora.DEFAULT_TARGETS, r=rank, seed=seed)
    for layer in state.layers.values():
        layer.B.data = rng.normal(0, 0.1, size=layer.B.shape).astype(np.float32)
    ids = rng.integers(4, TINY_LM.vocab_size, size=6).tolist()
    with no_grad():
        dynamic = lm_forward(b, None, ids).data
        lora.merge(state)
        merged = lm_forward(b, None, ids).data
    assert np.abs(dynamic - merged).max() <= 1e-6 * max(1.0, np.abs(dynamic).max())
    assert not b.lora


def test_double_merge_and_nonfinite():
    b = _bundle()
    state = lora.attach(b, "adapter.fc1.weight", r=1)
    lora.merge(state)
    with pytest.raises(lora.LoraStateError):
        lora.merge(state)
    b2 = _bundle()
    s2 = lora.attach(b2, "adapter.fc1.weight", r=1)
    s2.layers["adapter.fc1.weight"].A.data[0, 0] = np.nan
    with pytest.raises(lora.LoraStateError):
        lora.merge(s2)


def test_adapter_tensors_round_trip():
    b = _bundle()
    state = lora.attach(b, lora.DEFAULT_TARGETS, r=2)
    for layer in state.layers.values():
        layer.B.data = np.full(layer.B.shape, 0.5, dtype=np.float32)
    saved = lora.adapter_tensors(state)
    fresh = lora.attach(_bundle(), lora.DEFAULT_TARGETS, r=2, seed=9)
    lora.load_factors(fresh, saved)
    for t, layer in fresh.layers.items():
        np.testing.assert_array_equal(layer.B.data, state.layers[t].B.data)
        np.testing.assert_array_equal(layer.A.data, state.layers[t].A.data)
    del saved[next(iter(saved))]
    with pytest.raises(UnknownParameterError):
        lora.load_factors(fresh, saved)
