import numpy as np
import pytest

from vqelab import autograd as ag
from vqelab.autograd import Tensor
from vqelab.gradcheck import DEFAULT_FLOOR, finite_diff_check, relative_error, run_op_suite
from vqelab.modelcheck import run_model_suite


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-12 / DEFAULT_FLOOR)
    assert relative_error(2.0, 1.0) == 0.5


def test_check_of_known_function():
    x = Tensor(np.array([0.3, -1.2, 2.0]))
    rep = finite_diff_check(lambda v: (ag.tanh(v) * v).sum(), x)
    assert rep.passed and rep.checked == 3


def test_detects_wrong_gradient():
    def bad(v):
        # value depends on v**2 but the graph only sees v
        return v.sum() + Tensor._wrap(np.asarray(float((v.data**2).sum())))

    rep = finite_diff_check(bad, Tensor(np.array([1.0, 2.0])))
    assert not rep.passed
    assert rep.worst_index in ((0,), (1,))


def test_op_suite_passes_short():
    res = run_op_suite(seeds=5)
    assert res.passed, {k: v.max_rel_error for k, v in res.per_case.items() if not v.passed}
    assert {"matmul", "softmax", "layernorm", "embedding", "cross_entropy", "gelu"} <= set(res.per_case)


def test_negative_control_fails():
    assert not run_op_suite(seeds=1, break_case="layernorm").per_case["layernorm"].passed


def test_model_suite_short():
    res = run_model_suite(seeds=3)
    assert res.passed
    assert not run_model_suite(seeds=1, break_case="stage2_loss").per_case["stage2_loss"].passed
