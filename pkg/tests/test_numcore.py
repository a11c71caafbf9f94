import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsieve.data import ByteBatch
from gradsieve.errors import ContractError, NumericError
from gradsieve.models import ByteWindowLM, FeatureMLP
from gradsieve.numcore import (Layout, ParamVector, axpy, dot, finite_diff_grad,
                               grad, hvp, loss_value, norm, per_example_jvp,
                               relative_error, scale, value_and_grad)
from helpers import ComponentBatch, DiagQuadLoss


def lm_batch(rng, n=8, k=8):
    return ByteBatch(np.arange(n),
                     rng.integers(0, 256, (n, k)).astype(np.uint8),
                     rng.integers(0, 256, n).astype(np.uint8))


def quad_identity(dim=2):
    # 0.5*||theta||^2 as a single "component" with unit diagonal
    return DiagQuadLoss(np.ones((1, dim)), np.zeros((1, dim)))


ONE = ComponentBatch([0])


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------


def test_grad_quadratic_identity():
    loss = quad_identity()
    theta = ParamVector(np.array([3.0, 4.0]), loss.layout)
    assert np.allclose(grad(loss, theta, ONE).values, [3.0, 4.0])


def test_grad_product_rule():
    # loss = theta1 * theta2 via 0.5*[(t1+t2)^2 - t1^2 - t2^2]; check with a
    # direct two-component diagonal expansion instead: use centers to build it
    loss = DiagQuadLoss(np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]]))

    # f = 0.5(t1^2 + t2^2); instead check the product rule on the byte LM is
    # covered by finite differences; here assert the analytic diagonal case
    theta = ParamVector(np.array([2.0, 5.0]), loss.layout)
    assert np.allclose(grad(loss, theta, ONE).values, [2.0, 5.0])


def test_grad_matches_finite_differences_on_byte_lm():
    rng = np.random.default_rng(0)
    lm = ByteWindowLM(context=4, embed_dim=4, hidden=(8,))
    theta = lm.init_params(1)
    batch = lm_batch(rng, n=8, k=4)
    g = grad(lm, theta, batch)
    fd = finite_diff_grad(lm, theta, batch, h=1e-4)
    assert relative_error(g.values, fd.values) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_matches_fd_random_mlp_batches(seed):
    rng = np.random.default_rng(seed)
    from gradsieve.data import FeatureBatch

    mlp = FeatureMLP(3, (6,))
    theta = mlp.init_params(seed)
    batch = FeatureBatch(np.arange(5), rng.standard_normal((5, 3)),
                         rng.standard_normal(5))
    g = grad(mlp, theta, batch)
    fd = finite_diff_grad(mlp, theta, batch, h=1e-4)
    assert relative_error(g.values, fd.values) < 1e-4


def test_grad_value_matches_plain_evaluation_bitwise():
    rng = np.random.default_rng(3)
    lm = ByteWindowLM(context=4, embed_dim=4, hidden=(8,))
    theta = lm.init_params(5)
    batch = lm_batch(rng, n=4, k=4)
    val, _ = value_and_grad(lm, theta, batch)
    assert val == loss_value(lm, theta, batch)


def test_grad_nonfinite_loss_names_example():
    loss = quad_identity()
    bad = ParamVector(np.array([1.0, 1.0]), loss.layout)
    bad.values[0] = 1e300  # overflow squares to inf
    with pytest.raises(NumericError, match="example index 0"):
        grad(loss, bad, ONE)


def test_grad_layout_mismatch_is_contract_error():
    loss = quad_identity()
    other = ParamVector.zeros(Layout.build([("x", (3,))]))
    with pytest.raises(ContractError):
        grad(loss, other, ONE)


# ---------------------------------------------------------------------------
# hvp
# ---------------------------------------------------------------------------


def test_hvp_identity_hessian():
    loss = quad_identity()
    theta = ParamVector(np.array([3.0, 4.0]), loss.layout)
    v = ParamVector(np.array([1.0, -2.0]), loss.layout)
    assert np.allclose(hvp(loss, theta, v, ONE).values, [1.0, -2.0])


def test_hvp_diagonal_hessian():
    loss = DiagQuadLoss(np.array([[1.0, 2.0]]), np.zeros((1, 2)))
    theta = ParamVector(np.array([0.3, -0.7]), loss.layout)
    v = ParamVector(np.array([1.0, 1.0]), loss.layout)
    assert np.allclose(hvp(loss, theta, v, ONE).values, [1.0, 2.0])


def test_hvp_matches_fd_of_grad_on_byte_lm():
    rng = np.random.default_rng(1)
    lm = ByteWindowLM(context=4, embed_dim=4, hidden=(8,))
    theta = lm.init_params(2)
    batch = lm_batch(rng, n=6, k=4)
    v = ParamVector(rng.standard_normal(len(theta)), theta.layout)
    hv = hvp(lm, theta, v, batch)
    h = 1e-4
    fd = (grad(lm, axpy(h, v, theta), batch).values
          - grad(lm, axpy(-h, v, theta), batch).values) / (2 * h)
    assert relative_error(hv.values, fd) < 1e-3


@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_hvp_linear_in_v_on_quadratics(a, b):
    loss = DiagQuadLoss(np.array([[1.0, 2.0, 0.5]]), np.zeros((1, 3)))
    theta = ParamVector(np.array([0.1, 0.2, 0.3]), loss.layout)
    v1 = ParamVector(np.array([1.0, 0.0, -1.0]), loss.layout)
    v2 = ParamVector(np.array([0.5, -2.0, 1.0]), loss.layout)
    combo = axpy(a, v1, scale(b, v2))
    lhs = hvp(loss, theta, combo, ONE).values
    rhs = a * hvp(loss, theta, v1, ONE).values + b * hvp(loss, theta, v2, ONE).values
    assert relative_error(lhs, rhs) < 1e-10 or np.allclose(lhs, rhs, atol=1e-12)


def test_hvp_layout_mismatch_is_contract_error():
    loss = quad_identity()
    theta = ParamVector(np.zeros(2), loss.layout)
    v = ParamVector.zeros(Layout.build([("other", (2,))]))
    with pytest.raises(ContractError):
        hvp(loss, theta, v, ONE)


# ---------------------------------------------------------------------------
# finite differences and vector ops
# ---------------------------------------------------------------------------


def test_finite_diff_simple_quadratic():
    loss = quad_identity()
    theta = ParamVector(np.array([1.0, 0.0]), loss.layout)
    fd = finite_diff_grad(loss, theta, ONE, h=1e-4)
    assert np.allclose(fd.values, [1.0, 0.0], atol=1e-8)


def test_finite_diff_zero_parameter_model():
    class Empty(DiagQuadLoss):
        def __init__(self):
            self.layout = Layout.build([])

        def per_example(self, g, p, batch):
            return g.constant(np.zeros(1))

    loss = Empty()
    theta = ParamVector.zeros(loss.layout)
    assert len(finite_diff_grad(loss, theta, ONE)) == 0


def test_finite_diff_rejects_nonpositive_h():
    loss = quad_identity()
    theta = ParamVector(np.zeros(2), loss.layout)
    with pytest.raises(ContractError):
        finite_diff_grad(loss, theta, ONE, h=0.0)


def test_vec_ops():
    lay = Layout.build([("x", (2,))])
    a = ParamVector(np.array([1.0, 2.0]), lay)
    b = ParamVector(np.array([3.0, 4.0]), lay)
    assert dot(a, b) == 11.0
    assert np.allclose(axpy(2.0, a, ParamVector(np.array([0.0, 1.0]), lay)).values,
                       [2.0, 5.0])
    assert norm(ParamVector(np.array([3.0, 4.0]), lay)) == 5.0
    assert np.allclose(scale(2.0, a).values, [2.0, 4.0])


def test_vec_ops_layout_mismatch():
    a = ParamVector(np.zeros(2), Layout.build([("x", (2,))]))
    b = ParamVector(np.zeros(2), Layout.build([("y", (2,))]))
    with pytest.raises(ContractError):
        dot(a, b)


def test_param_vector_rejects_nonfinite():
    lay = Layout.build([("x", (2,))])
    with pytest.raises(NumericError):
        ParamVector(np.array([1.0, np.nan]), lay)


def test_layout_invariants():
    with pytest.raises(ContractError):
        Layout.build([("a", (2,)), ("a", (3,))])  # duplicate name
    from gradsieve.numcore import Segment

    with pytest.raises(ContractError):
        Layout([Segment("a", 0, (2,)), Segment("b", 3, (2,))])  # gap


# ---------------------------------------------------------------------------
# determinism and jvp
# ---------------------------------------------------------------------------


def test_grad_bit_identical_across_calls():
    rng = np.random.default_rng(9)
    lm = ByteWindowLM(context=4, embed_dim=4, hidden=(8,))
    theta = lm.init_params(4)
    batch = lm_batch(rng, n=4, k=4)
    g1 = grad(lm, theta, batch)
    g2 = grad(lm, theta, batch)
    assert np.array_equal(g1.values, g2.values)


def test_per_example_jvp_matches_single_example_grads():
    rng = np.random.default_rng(11)
    lm = ByteWindowLM(context=4, embed_dim=4, hidden=(8,))
    theta = lm.init_params(7)
    batch = lm_batch(rng, n=5, k=4)
    d = ParamVector(rng.standard_normal(len(theta)), theta.layout)
    t = per_example_jvp(lm, theta, d, batch)
    brute = np.array([dot(grad(lm, theta, batch.take(np.array([i]))), d)
                      for i in range(5)])
    assert relative_error(t, brute) < 1e-12
