import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY_LM, TINY_VISION
from vqelab import lora
from vqelab.checkpoint import (
    FormatError,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    save_checkpoint,
)
from vqelab.models import ModelBundle


def test_byte_layout_by_hand():
    buf = encode_tensors({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (
        b"SVQE" + struct.pack("<II", 1, 1)
        + struct.pack("<I", 1) + b"w"
        + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2)
        + b"\x00" + struct.pack("<ff", 1.0, 2.0)
    )
    assert buf == expected


@given(st.dictionaries(
    st.text(min_size=1, max_size=12),
    st.one_of(
        arrays(np.float32, st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)),
        arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)),
    ),
    max_size=4,
))
def test_round_trip_bit_exact(tensors):
    out = decode_tensors(encode_tensors(tensors))
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        assert out[k].tobytes() == v.tobytes()


def test_rejections():
    good = encode_tensors({"a": np.arange(3, dtype=np.float64)})
    with pytest.raises(FormatError) as exc:
        decode_tensors(b"XXXX" + good[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError) as exc:
        decode_tensors(good[:4] + struct.pack("<I", 2) + good[8:])
    assert exc.value.offset == 4
    with pytest.raises(FormatError, match="truncated"):
        decode_tensors(good[:-1])
    with pytest.raises(FormatError, match="trailing"):
        decode_tensors(good + b"\x00")
    bad_dtype = bytearray(good)
    bad_dtype[len(good) - 3 * 8 - 1] = 7
    with pytest.raises(FormatError, match="dtype") as exc:
        decode_tensors(bytes(bad_dtype))
    assert exc.value.offset == len(good) - 3 * 8 - 1


@pytest.mark.parametrize("cut", [3, 10, 14, 20, 30])
def test_truncation_offsets_inside_file(cut):
    good = encode_tensors({"abc": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(FormatError) as exc:
        decode_tensors(good[:cut])
    assert 0 <= exc.value.offset <= cut


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bundle_round_trip(tmp_path, dtype):
    b = ModelBundle(TINY_VISION, TINY_LM, seed=4, dtype=dtype, pooling="last")
    path = save_checkpoint(b, tmp_path / "m.svqe")
    loaded = load_checkpoint(path)
    assert loaded.vision_cfg == b.vision_cfg and loaded.lm_cfg == b.lm_cfg
    assert loaded.pooling == "last" and loaded.dtype == np.dtype(dtype)
    for k, v in b.params.items():
        assert loaded.params[k].data.tobytes() == v.data.tobytes()


def test_unmerged_lora_refused(tmp_path):
    b = ModelBundle(TINY_VISION, TINY_LM)
    lora.attach(b, "adapter.fc1.weight", r=1)
    with pytest.raises(ValueError, match="unmerged"):
        save_checkpoint(b, tmp_path / "x.svqe")


def test_missing_meta(tmp_path):
    path = tmp_path / "raw.svqe"
    path.write_bytes(encode_tensors({"a": np.zeros(1)}))
    with pytest.raises(FormatError):
        load_checkpoint(path)
