"""Finite-difference verification of analytic gradients, op by op."""

import numpy as np
import pytest

from tomatoseg import tensor as T
from tomatoseg.gradcheck import SUITE, TOL, check_scalar_fn, finite_difference

PER_OP = [name for name in SUITE if name != "full_model_lt"]


@pytest.mark.parametrize("name", PER_OP)
def test_op_gradient(name):
    result = check_scalar_fn(name, lambda: SUITE[name](0))
    assert result.passed, f"{name}: max rel err {result.max_rel_err:.3e}"
    assert result.max_rel_err <= TOL


def test_full_model_lt_gradient():
    result = check_scalar_fn(
        "full_model_lt", lambda: SUITE["full_model_lt"](0), min_frac=0.99
    )
    assert result.passed, f"coverage {result.frac_within:.2%}, max {result.max_rel_err:.3e}"
    assert result.frac_within >= 0.99


def test_matmul_sum_grad_matches_fd():
    # gradient of sum(A @ B) w.r.t. A against the oracle directly
    rng = np.random.default_rng(11)
    a = T.Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), requires_grad=True)
    b = T.Tensor(rng.uniform(-1, 1, (4, 2)).astype(np.float32))

    def forward():
        return T.sum_all(T.matmul(a, b))

    T.backward(forward())
    numeric = finite_difference(forward, a)
    denom = np.maximum(np.abs(numeric), 1e-2)
    assert (np.abs(a.grad - numeric) / denom).max() <= 1e-3


def test_injected_fault_is_detected():
    with T.inject_backward_fault("conv2d"):
        bad = check_scalar_fn("conv2d", lambda: SUITE["conv2d"](0))
        good = check_scalar_fn("matmul", lambda: SUITE["matmul"](0))
    assert not bad.passed
    assert good.passed
