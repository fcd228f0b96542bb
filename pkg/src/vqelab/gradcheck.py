"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad

# guards the denominator when analytic and numeric gradients both vanish
DEFAULT_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(a: float, n: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    coords: Sequence[tuple[int, tuple]] | None = None,
    floor: float = DEFAULT_FLOOR,
) -> GradCheckReport:
    """Compare backward() against (f(x+h e) - f(x-h e)) / 2h per coordinate.

    ``x`` may be one tensor or several; ``f`` is called as ``f(*xs)`` and must
    return a scalar. ``coords`` restricts the check to ``(input, index)``
    pairs; by default every coordinate of every input is checked.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
        t.requires_grad = True
    out = f(*xs)
    ag.backward(out)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    if coords is None:
        coords = [(k, idx) for k, t in enumerate(xs) for idx in np.ndindex(*t.shape)]

    worst = (-1.0, -1, (), 0.0, 0.0)
    with no_grad():
        for k, idx in coords:
            arr = xs[k].data
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(f(*xs).data)
            arr[idx] = orig - h
            fm = float(f(*xs).data)
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grads[k][idx])
            err = relative_error(analytic, numeric, floor)
            if err > worst[0]:
                worst = (err, k, tuple(idx), analytic, numeric)
    return GradCheckReport(
        max_rel_error=max(worst[0], 0.0),
        worst_input=worst[1],
        worst_index=worst[2],
        analytic=worst[3],
        numeric=worst[4],
        checked=len(coords),
        tol=tol,
    )


# -- op suite --------------------------------------------------------------------

@dataclass
class SuiteResult:
    per_case: dict[str, GradCheckReport] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for r in self.per_case.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.per_case.values())


def _u(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), dtype=np.float64)


def _proj(rng, t_shape):
    # random readout so that sum-to-constant outputs still carry gradient
    return Tensor(rng.normal(size=t_shape), dtype=np.float64)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Fresh random inputs for every differentiable op, each reduced to a scalar."""
    cases = {}
    w34 = _proj(rng, (3, 4))
    w4 = _proj(rng, (4,))
    w24 = _proj(rng, (2, 4))
    w_cat = _proj(rng, (5, 4))

    cases["matmul"] = (lambda a, b: (ag.matmul(a, b) * w34).sum(), [_u(rng, 3, 2), _u(rng, 2, 4)])
    cases["add"] = (lambda a, b: (ag.add(a, b) * w34).sum(), [_u(rng, 3, 4), _u(rng, 4)])
    cases["sub"] = (lambda a, b: (ag.sub(a, b) * w34).sum(), [_u(rng, 3, 4), _u(rng, 3, 4)])
    cases["mul"] = (lambda a, b: (ag.mul(a, b) * w34).sum(), [_u(rng, 3, 4), _u(rng, 4)])
    cases["sigmoid"] = (lambda a: (ag.sigmoid(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["log_sigmoid"] = (lambda a: (ag.log_sigmoid(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["gelu"] = (lambda a: (ag.gelu(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["tanh"] = (lambda a: (ag.tanh(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["exp"] = (lambda a: (ag.exp(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["softmax"] = (lambda a: (ag.softmax(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["log_softmax"] = (lambda a: (ag.log_softmax(a) * w34).sum(), [_u(rng, 3, 4)])
    cases["layernorm"] = (
        lambda x, g, b: (ag.layernorm(x, g, b, 1e-5) * w34).sum(),
        [_u(rng, 3, 4), _u(rng, 4), _u(rng, 4)],
    )
    ids = rng.integers(0, 5, size=4)
    cases["embedding"] = (lambda t: (ag.embedding(t, ids) * w34.reshape(4, 3)).sum(), [_u(rng, 5, 3)])
    cases["transpose"] = (lambda a: (ag.transpose(a) * w34).sum(), [_u(rng, 4, 3)])
    cases["reshape"] = (lambda a: (ag.reshape(a, (3, 4)) * w34).sum(), [_u(rng, 2, 6)])
    cases["getitem"] = (lambda a: (a[1:3] * w24).sum(), [_u(rng, 4, 4)])
    cases["concat"] = (lambda a, b: (ag.concat([a, b], axis=0) * w_cat).sum(), [_u(rng, 2, 4), _u(rng, 3, 4)])
    cases["sum_axis"] = (lambda a: (a.sum(axis=0) * w4).sum(), [_u(rng, 3, 4)])
    cases["mean_axis"] = (lambda a: (a.mean(axis=0) * w4).sum(), [_u(rng, 3, 4)])
    target = _u(rng, 3, 4)
    cases["mse_loss"] = (lambda a: ag.mse_loss(a, target), [_u(rng, 3, 4)])
    labels = rng.integers(0, 4, size=3)
    cases["cross_entropy"] = (lambda a: ag.cross_entropy(a, labels), [_u(rng, 3, 4)])
    # composite: cross-entropy over a softmax-weighted mixing chain
    cases["cross_entropy_chain"] = (
        lambda a, m: ag.cross_entropy(ag.matmul(ag.softmax(a), m), labels),
        [_u(rng, 3, 4), _u(rng, 4, 4)],
    )
    return cases


def run_op_suite(seeds: int = 100, h: float = 1e-5, tol: float = 1e-4, break_case: str | None = None) -> SuiteResult:
    """Check every op over ``seeds`` random draws; keep each op's worst report.

    ``break_case`` names a case whose function gains an untracked term, a
    negative control proving the suite can fail.
    """
    result = SuiteResult()
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in op_cases(rng).items():
            if name == break_case:
                fn = _broken(fn)
            rep = finite_diff_check(fn, inputs, h=h, tol=tol)
            prev = result.per_case.get(name)
            if prev is None or rep.max_rel_error > prev.max_rel_error:
                result.per_case[name] = rep
    return result


def _broken(fn):
    def wrapped(*xs):
        out = fn(*xs)
        extra = 0.01 * sum(float((x.data**2).sum()) for x in xs)
        return out + Tensor._wrap(np.asarray(extra, dtype=out.dtype))

    return wrapped
