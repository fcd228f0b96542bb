"""Finite-difference checks of whole training losses on a float64 micro-model."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import lora
from .dataset import EncodedExample
from .gradcheck import SuiteResult, _broken, finite_diff_check
from .models import LMConfig, ModelBundle, VisionConfig, adapter_forward, embed_text, encode_image
from .training import SlideCache, alignment_loss, response_loss

MICRO_VISION = VisionConfig(image_height=8, image_width=8, patch_size=4, embed_dim=8, layers=1, heads=2, mlp_ratio=2)
# Whole losses are O(1), so central differences at h=1e-5 carry ~1e-11 absolute
# round-off; the denominator floor keeps vanishing coordinates from reading as failures.
MODEL_FLOOR = 1e-6
MICRO_LM = LMConfig(vocab_size=16, embed_dim=8, layers=1, heads=2, context_len=24, mlp_ratio=2)


def _coords(rng, tensors, per_input):
    out = []
    for k, t in enumerate(tensors):
        flat = rng.choice(t.size, size=min(per_input, t.size), replace=False)
        out += [(k, tuple(int(v) for v in np.unravel_index(int(i), t.shape))) for i in flat]
    return out


def _example(rng) -> EncodedExample:
    n_prompt, n_resp = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    ids = [1] + rng.integers(4, MICRO_LM.vocab_size, size=n_prompt + n_resp).tolist() + [2]
    mask = [False] * (1 + n_prompt) + [True] * n_resp + [False]
    return EncodedExample(key=(1, int(rng.integers(1, 4))), ids=ids, response_mask=mask)


def micro_cases(seed: int, per_input: int = 4):
    """name -> (loss fn, input tensors, coords) for the stage 1, 2 and 3 losses."""
    rng = np.random.default_rng(seed)
    bundle = ModelBundle(MICRO_VISION, MICRO_LM, seed=seed, dtype=np.float64)
    p = bundle.params
    slides = SlideCache(bundle)
    images = [slides((1, i)) for i in (1, 2)]
    text_ids = [rng.integers(4, 16, size=5).tolist() for _ in images]

    def stage1(*_):
        v = np.stack([encode_image(bundle, im)[1].data for im in images])
        t = np.stack([embed_text(bundle, ids)[1].data for ids in text_ids])
        return alignment_loss(bundle, v, t)

    def stage1_full(*_):
        # same objective, with the frozen towers kept in the graph
        v = ag.concat([ag.reshape(encode_image(bundle, im)[1], (1, -1)) for im in images], axis=0)
        t = ag.concat([ag.reshape(embed_text(bundle, ids)[1], (1, -1)) for ids in text_ids], axis=0)
        return ag.mse_loss(adapter_forward(bundle, v), t)

    batch = [_example(rng), _example(rng)]

    def stage2(*_):
        return response_loss(bundle, batch, slides)

    s1_in = [p["adapter.fc1.weight"], p["adapter.fc1.bias"], p["adapter.fc2.weight"], p["adapter.fc2.bias"]]
    s1f_in = [p["adapter.fc1.weight"], p["vision.patch_embed.weight"], p["lm.tok_embed"]]
    s2_in = [
        p["adapter.fc1.weight"],
        p["lm.tok_embed"],
        p["lm.blocks.0.attn.q.weight"],
        p["lm.blocks.0.mlp.fc1.weight"],
        p["lm.head.weight"],
        p["vision.patch_embed.weight"],
    ]
    cases = {
        "stage1_loss": (stage1, s1_in, _coords(rng, s1_in, per_input)),
        "stage1_graph": (stage1_full, s1f_in, _coords(rng, s1f_in, per_input)),
        "stage2_loss": (stage2, s2_in, _coords(rng, s2_in, per_input)),
    }

    lb = ModelBundle(MICRO_VISION, MICRO_LM, seed=seed + 1, dtype=np.float64)
    state = lora.attach(lb, ("lm.blocks.*.attn.q.weight", "adapter.fc1.weight"), r=2, seed=seed)
    for layer in state.layers.values():
        layer.B.data = rng.normal(0.0, 0.1, size=layer.B.shape)
    lslides = SlideCache(lb)
    s3_in = list(state.phi.values())

    def stage3(*_):
        return response_loss(lb, batch, lslides)

    cases["stage3_lora_loss"] = (stage3, s3_in, _coords(rng, s3_in, per_input))
    return cases


def run_model_suite(seeds: int = 100, h: float = 1e-5, tol: float = 1e-4, break_case: str | None = None,
                    per_input: int = 4, floor: float = MODEL_FLOOR) -> SuiteResult:
    result = SuiteResult()
    for seed in range(seeds):
        for name, (fn, inputs, coords) in micro_cases(seed, per_input).items():
            if name == break_case:
                fn = _broken(fn)
            rep = finite_diff_check(fn, inputs, h=h, tol=tol, coords=coords, floor=floor)
            prev = result.per_case.get(name)
            if prev is None or rep.max_rel_error > prev.max_rel_error:
                result.per_case[name] = rep
    return result


