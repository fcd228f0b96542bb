"""Miniature vision encoder, causal LM and the two-layer MLP adapter.

All parameters live in one flat, ordered name -> Tensor mapping on a
:class:`ModelBundle`, with a parallel freeze map. Names are dotted paths
(``vision.blocks.0.attn.q.weight``, ``adapter.fc1.bias`` ...) so glob
patterns select groups of them.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor, no_grad

EOS_ID = 2
MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    def __init__(self, length: int, limit: int, what: str = "sequence") -> None:
        super().__init__(f"{what} length {length} exceeds context limit {limit}")
        self.length = length
        self.limit = limit


class UnknownParameterError(KeyError):
    pass


@dataclass
class VisionConfig:
    image_height: int = 36
    image_width: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        p = self.patch_size
        if p < 1 or self.image_height % p or self.image_width % p:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {p}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class LMConfig:
    vocab_size: int = 512
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    context_len: int = 256
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


def _block_shapes(prefix: str, d: int, ratio: int) -> list[tuple[str, tuple, str]]:
    hidden = ratio * d
    out = [(f"{prefix}.ln1.gain", (d,), "one"), (f"{prefix}.ln1.bias", (d,), "zero")]
    for proj in ("q", "k", "v", "o"):
        out.append((f"{prefix}.attn.{proj}.weight", (d, d), "normal"))
        out.append((f"{prefix}.attn.{proj}.bias", (d,), "zero"))
    out += [
        (f"{prefix}.ln2.gain", (d,), "one"),
        (f"{prefix}.ln2.bias", (d,), "zero"),
        (f"{prefix}.mlp.fc1.weight", (hidden, d), "normal"),
        (f"{prefix}.mlp.fc1.bias", (hidden,), "zero"),
        (f"{prefix}.mlp.fc2.weight", (d, hidden), "normal"),
        (f"{prefix}.mlp.fc2.bias", (d,), "zero"),
    ]
    return out


def parameter_layout(vision: VisionConfig, lm: LMConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init) triples for every base parameter."""
    dv, d = vision.embed_dim, lm.embed_dim
    p2 = vision.patch_size**2
    layout = [
        ("vision.patch_embed.weight", (dv, p2), "normal"),
        ("vision.patch_embed.bias", (dv,), "zero"),
        ("vision.pos_embed", (vision.num_patches, dv), "normal"),
    ]
    for i in range(vision.layers):
        layout += _block_shapes(f"vision.blocks.{i}", dv, vision.mlp_ratio)
    layout += [("vision.ln_f.gain", (dv,), "one"), ("vision.ln_f.bias", (dv,), "zero")]

    layout += [
        ("adapter.fc1.weight", (2 * dv, dv), "normal"),
        ("adapter.fc1.bias", (2 * dv,), "zero"),
        ("adapter.fc2.weight", (d, 2 * dv), "normal"),
        ("adapter.fc2.bias", (d,), "zero"),
    ]

    layout += [
        ("lm.tok_embed", (lm.vocab_size, d), "normal"),
        ("lm.pos_embed", (lm.context_len, d), "normal"),
    ]
    for i in range(lm.layers):
        layout += _block_shapes(f"lm.blocks.{i}", d, lm.mlp_ratio)
    layout += [
        ("lm.ln_f.gain", (d,), "one"),
        ("lm.ln_f.bias", (d,), "zero"),
        ("lm.head.weight", (lm.vocab_size, d), "normal"),
        ("lm.head.bias", (lm.vocab_size,), "zero"),
    ]
    return layout


class ModelBundle:
    """Vision encoder + causal LM + MLP adapter, with per-parameter freeze flags."""

    def __init__(
        self,
        vision: VisionConfig | None = None,
        lm: LMConfig | None = None,
        seed: int = 0,
        dtype=np.float32,
        pooling: str = "mean",
        init_std: float = 0.02,
    ) -> None:
        self.vision_cfg = vision or VisionConfig()
        self.lm_cfg = lm or LMConfig()
        if pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}
        self.lora: dict = {}  # weight name -> lora.LoraLayer
        rng = np.random.default_rng(seed)
        for name, shape, init in parameter_layout(self.vision_cfg, self.lm_cfg):
            if init == "normal":
                arr = rng.normal(0.0, init_std, size=shape)
            elif init == "one":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[name] = Tensor._wrap(arr.astype(self.dtype), requires_grad=True)
            self.frozen[name] = False
        self._check()
        self._vision_cache: dict = {}

    def _check(self) -> None:
        out_dim = self.params["adapter.fc2.weight"].shape[0]
        if out_dim != self.lm_cfg.embed_dim:
            raise ConfigError(f"adapter output {out_dim} != LM embed_dim {self.lm_cfg.embed_dim}")
        if set(self.frozen) != set(self.params):
            raise ConfigError("freeze map out of sync with parameters")

    # -- parameter bookkeeping ---------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise UnknownParameterError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(self.dtype, copy=True)
        self._vision_cache.clear()

    def config_dict(self) -> dict:
        return {"vision": asdict(self.vision_cfg), "lm": asdict(self.lm_cfg), "pooling": self.pooling}

    def copy(self) -> "ModelBundle":
        other = ModelBundle.__new__(ModelBundle)
        other.vision_cfg, other.lm_cfg = self.vision_cfg, self.lm_cfg
        other.pooling, other.dtype = self.pooling, self.dtype
        other.params = {k: Tensor._wrap(v.data.copy(), v.requires_grad) for k, v in self.params.items()}
        other.frozen = dict(self.frozen)
        other.lora = {}
        other._vision_cache = {}
        return other

    def linear(self, x: Tensor, prefix: str) -> Tensor:
        """``x @ W.T + b`` for the layer at ``prefix``, routed through LoRA if attached."""
        wname = prefix + ".weight"
        layer = self.lora.get(wname)
        if layer is not None:
            from .lora import lora_forward

            y = lora_forward(layer, x)
        else:
            w = self.params[wname]
            if x.shape[-1] != w.shape[1]:
                raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
            y = ag.matmul(x, ag.transpose(w))
        b = self.params.get(prefix + ".bias")
        return y if b is None else y + b


# -- freezing -------------------------------------------------------------------

def _match(names: Iterable[str], pattern: str) -> list[str]:
    return [n for n in names if fnmatch.fnmatchcase(n, pattern)]


def set_frozen(bundle: ModelBundle, pattern: str, flag: bool = True) -> list[str]:
    """Freeze (or unfreeze) every base parameter whose name matches ``pattern``."""
    names = _match(bundle.params, pattern)
    if not names:
        raise UnknownParameterError(f"pattern {pattern!r} matches no parameter")
    for n in names:
        bundle.frozen[n] = bool(flag)
        bundle.params[n].requires_grad = not flag
    if any(n.startswith("vision.") for n in names):
        bundle._vision_cache.clear()
    return names


def trainable_params(bundle: ModelBundle) -> list[tuple[str, Tensor]]:
    """Unfrozen base parameters followed by any attached LoRA factors."""
    out = [(n, t) for n, t in bundle.params.items() if not bundle.frozen[n]]
    for target, layer in bundle.lora.items():
        out.append((f"lora.{target}.A", layer.A))
        out.append((f"lora.{target}.B", layer.B))
    return out


# -- building blocks -------------------------------------------------------------------

_mask_cache: dict = {}


def _causal_mask(n: int, dtype) -> Tensor:
    key = (n, np.dtype(dtype))
    m = _mask_cache.get(key)
    if m is None:
        arr = np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)
        m = Tensor._wrap(arr)
        _mask_cache[key] = m
    return m


def attention(bundle: ModelBundle, x: Tensor, prefix: str, heads: int, causal: bool) -> Tensor:
    d = x.shape[-1]
    dh = d // heads
    q = bundle.linear(x, prefix + ".q")
    k = bundle.linear(x, prefix + ".k")
    v = bundle.linear(x, prefix + ".v")
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        scores = ag.matmul(q[cols], ag.transpose(k[cols])) * scale
        if causal:
            scores = scores + _causal_mask(x.shape[0], x.dtype)
        outs.append(ag.matmul(ag.softmax(scores), v[cols]))
    merged = outs[0] if heads == 1 else ag.concat(outs, axis=1)
    return bundle.linear(merged, prefix + ".o")


def transformer_block(bundle: ModelBundle, x: Tensor, prefix: str, heads: int, causal: bool) -> Tensor:
    p = bundle.params
    h = ag.layernorm(x, p[prefix + ".ln1.gain"], p[prefix + ".ln1.bias"])
    x = x + attention(bundle, h, prefix + ".attn", heads, causal)
    h = ag.layernorm(x, p[prefix + ".ln2.gain"], p[prefix + ".ln2.bias"])
    h = ag.gelu(bundle.linear(h, prefix + ".mlp.fc1"))
    return x + bundle.linear(h, prefix + ".mlp.fc2")


def _pool(bundle: ModelBundle, feats: Tensor) -> Tensor:
    if bundle.pooling == "last":
        return feats[-1]
    return ag.mean(feats, axis=0)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) image -> (num_patches, patch*patch), row-major over the patch grid."""
    h, w = image.shape
    gh, gw = h // patch, w // patch
    return image.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)


# -- public forward passes --------------------------------------------------------------

def encode_image(bundle: ModelBundle, image) -> tuple[Tensor, Tensor]:
    """Per-patch features (P x d_v) and their pooled vector (d_v)."""
    cfg = bundle.vision_cfg
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.shape != (cfg.image_height, cfg.image_width):
        raise ShapeError(f"image shape {img.shape} != expected {(cfg.image_height, cfg.image_width)}")
    p = bundle.params
    patches = Tensor._wrap(patchify(img.astype(bundle.dtype), cfg.patch_size))
    x = bundle.linear(patches, "vision.patch_embed") + p["vision.pos_embed"]
    for i in range(cfg.layers):
        x = transformer_block(bundle, x, f"vision.blocks.{i}", cfg.heads, causal=False)
    x = ag.layernorm(x, p["vision.ln_f.gain"], p["vision.ln_f.bias"])
    return x, _pool(bundle, x)


def adapter_forward(bundle: ModelBundle, patch_features: Tensor) -> Tensor:
    """linear -> GELU -> linear, applied to every row."""
    dv = bundle.params["adapter.fc1.weight"].shape[1]
    if patch_features.shape[-1] != dv:
        raise ShapeError(f"adapter expects feature dim {dv}, got {patch_features.shape}")
    h = ag.gelu(bundle.linear(patch_features, "adapter.fc1"))
    return bundle.linear(h, "adapter.fc2")


def lm_hidden(bundle: ModelBundle, prefix: Tensor | None, ids: Sequence[int]) -> Tensor:
    cfg = bundle.lm_cfg
    p = bundle.params
    k = 0 if prefix is None else prefix.shape[0]
    total = k + len(ids)
    if total > cfg.context_len:
        raise LengthError(total, cfg.context_len)
    if prefix is not None and prefix.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"prefix dim {prefix.shape[-1]} != LM embed_dim {cfg.embed_dim}")
    tok = ag.embedding(p["lm.tok_embed"], list(ids))
    if k and len(ids):
        x = ag.concat([prefix, tok], axis=0)
    elif k:
        x = prefix
    else:
        x = tok
    if total == 0:
        raise ShapeError("empty input to the language model")
    x = x + p["lm.pos_embed"][:total]
    for i in range(cfg.layers):
        x = transformer_block(bundle, x, f"lm.blocks.{i}", cfg.heads, causal=True)
    return ag.layernorm(x, p["lm.ln_f.gain"], p["lm.ln_f.bias"])


def embed_text(bundle: ModelBundle, ids: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Causal LM features for ``ids`` (L x d) and their pooled vector."""
    if len(ids) > bundle.lm_cfg.context_len:
        raise LengthError(len(ids), bundle.lm_cfg.context_len, "text")
    feats = lm_hidden(bundle, None, ids)
    return feats, _pool(bundle, feats)


def lm_forward(bundle: ModelBundle, prefix_embeddings: Tensor | None, ids: Sequence[int]) -> Tensor:
    """Logits ((K+L) x V) for prefix embeddings followed by token ids."""
    h = lm_hidden(bundle, prefix_embeddings, ids)
    return bundle.linear(h, "lm.head")


def image_prefix(bundle: ModelBundle, image, cache_key=None) -> Tensor:
    """Adapter-projected patch features used as the LM prefix.

    With a ``cache_key`` and a frozen vision tower the encoder output is
    computed once and reused; the adapter is always re-run.
    """
    vision_frozen = all(bundle.frozen[n] for n in bundle.params if n.startswith("vision."))
    if cache_key is not None and vision_frozen and not any(k.startswith("vision.") for k in bundle.lora):
        feats = bundle._vision_cache.get(cache_key)
        if feats is None:
            with no_grad():
                feats, _ = encode_image(bundle, image)
            bundle._vision_cache[cache_key] = feats
    else:
        feats, _ = encode_image(bundle, image)
    return adapter_forward(bundle, feats)


def sigmoid_pairwise_loss(image_pooled: Tensor, text_pooled: Tensor, temperature: float, bias: float) -> Tensor:
    """-(1/N) sum_ij log sigmoid(z_ij (t <x_i, y_j> + b)), z = +1 on the diagonal else -1."""
    if image_pooled.shape != text_pooled.shape or image_pooled.ndim != 2:
        raise ShapeError(f"pairwise loss: {image_pooled.shape} vs {text_pooled.shape}")
    n = image_pooled.shape[0]
    if n < 1:
        raise ShapeError("pairwise loss needs at least one pair")
    logits = ag.matmul(image_pooled, ag.transpose(text_pooled)) * float(temperature) + float(bias)
    signs = Tensor._wrap((2.0 * np.eye(n) - 1.0).astype(image_pooled.dtype))
    return -ag.log_sigmoid(logits * signs).sum() * (1.0 / n)


def generate(
    bundle: ModelBundle,
    prefix_embeddings: Tensor | None,
    prompt_ids: Sequence[int],
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[int]:
    """Greedy decoding; stops at ``eos_id``, ``max_new`` tokens, or a full context."""
    k = 0 if prefix_embeddings is None else prefix_embeddings.shape[0]
    limit = bundle.lm_cfg.context_len
    if k + len(prompt_ids) > limit:
        raise LengthError(k + len(prompt_ids), limit, "prompt")
    ids = list(prompt_ids)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            total = k + len(ids)
            if total == 0 or total > limit:
                break
            logits = lm_forward(bundle, prefix_embeddings, ids)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out
