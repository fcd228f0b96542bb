"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"SVQE"  u32 version  u32 count
    repeated count times:
        u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
        u8 dtype (0 = f32, 1 = f64), raw little-endian values

Full-model checkpoints carry two extra float64 vectors, ``meta.vision`` and
``meta.lm``, holding the architecture so a bundle can be rebuilt from the
file alone.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .models import LMConfig, ModelBundle, VisionConfig

MAGIC = b"SVQE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_VISION_KEYS = ("image_height", "image_width", "patch_size", "embed_dim", "layers", "heads", "mlp_ratio")
_LM_KEYS = ("vocab_size", "embed_dim", "layers", "heads", "context_len", "mlp_ratio")
_POOLING = ("mean", "last")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start) from exc
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        code_at = pos
        (code,) = struct.unpack("<B", take(1, "dtype"))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", code_at)
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(n * dt.itemsize, f"values of {name}")
        out[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return out


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)
    return path


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    out = {
        "meta.vision": np.array([getattr(bundle.vision_cfg, k) for k in _VISION_KEYS], dtype=np.float64),
        "meta.lm": np.array(
            [getattr(bundle.lm_cfg, k) for k in _LM_KEYS] + [_POOLING.index(bundle.pooling)], dtype=np.float64
        ),
    }
    for name, t in bundle.params.items():
        out[name] = t.data
    return out


def save_checkpoint(bundle: ModelBundle, path: str | os.PathLike) -> Path:
    if bundle.lora:
        raise ValueError("bundle has unmerged LoRA adapters; merge or save them separately")
    return write_tensors(path, bundle_tensors(bundle))


def load_checkpoint(path: str | os.PathLike) -> ModelBundle:
    tensors = read_tensors(path)
    try:
        vmeta = tensors.pop("meta.vision")
        lmeta = tensors.pop("meta.lm")
    except KeyError as exc:
        raise FormatError(f"checkpoint has no architecture record ({exc.args[0]})", 0) from None
    vision = VisionConfig(**{k: int(v) for k, v in zip(_VISION_KEYS, vmeta)})
    lm = LMConfig(**{k: int(v) for k, v in zip(_LM_KEYS, lmeta[: len(_LM_KEYS)])})
    pooling = _POOLING[int(lmeta[len(_LM_KEYS)])]
    dtype = next(iter(tensors.values())).dtype
    bundle = ModelBundle(vision, lm, seed=0, dtype=dtype, pooling=pooling)
    extra = set(tensors) - set(bundle.params)
    if extra:
        raise FormatError(f"unexpected tensors in checkpoint: {sorted(extra)[:5]}", 0)
    bundle.load_state_dict(tensors)
    return bundle
