import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zerosiam import acceptance
from zerosiam import autodiff as ad
from zerosiam.autodiff import ContractError, NumericError, ShapeError, Tensor


def fd_grad(f, x, h=1e-6):
    """Central differences of scalar f at array x."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def analytic_grad(build, x):
    t = Tensor(x, requires_grad=True)
    ad.backward(build(t))
    return t.grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


# ---------------------------------------------------------------- spec examples


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_projector_selects_row():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_gradient_matches_fd():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = Tensor([[1.0], [1.0]])
    g = analytic_grad(lambda t: ad.sum(ad.matmul(t, B)), A)
    np.testing.assert_allclose(g, np.ones((2, 2)), atol=1e-12)
    fd = fd_grad(lambda a: float((a @ B.data).sum()), A)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_ln2():
    p = ad.softmax(Tensor([[math.log(2.0), 0.0, 0.0]])).data
    np.testing.assert_allclose(p, [[0.5, 0.25, 0.25]], atol=1e-15)


def test_softmax_shift_invariance():
    u = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_allclose(ad.softmax(Tensor(u + 17.3)).data, ad.softmax(Tensor(u)).data, atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([[0.0, np.inf]]))
    with pytest.raises(NumericError):
        ad.softmax(Tensor([[np.nan, 0.0]]))


def test_softmax_needs_two_classes():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor([[1.0]]))


def test_stop_gradient_blocks():
    theta = Tensor([1.0, 2.0], requires_grad=True)
    x = Tensor([3.0, 4.0])
    ad.backward(ad.sum(ad.stop_gradient(ad.mul(theta, x))))
    assert theta.grad is None or not theta.grad.any()


def test_stop_gradient_only_live_branch_counts():
    x = Tensor([3.0, 4.0])
    theta = Tensor([1.0, 2.0], requires_grad=True)
    live = ad.mul(theta, x)
    ad.backward(ad.sum(ad.add(live, ad.stop_gradient(ad.mul(theta, x)))))
    np.testing.assert_array_equal(theta.grad, x.data)


def test_stop_gradient_passes_values_and_clears_flags():
    t = Tensor([[0.1, -2.0]], requires_grad=True)
    y = ad.scale(t, 3.0)
    s = ad.stop_gradient(y)
    np.testing.assert_array_equal(s.data, y.data)
    assert s.node is None and s.requires_grad is False


def test_backward_sum():
    t = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(t))
    np.testing.assert_array_equal(t.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    t = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(t, t)))
    np.testing.assert_array_equal(t.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_until_cleared():
    t = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(t))
    ad.backward(ad.sum(ad.scale(t, 2.0)))
    np.testing.assert_array_equal(t.grad, [3.0, 3.0])
    t.zero_grad()
    assert t.grad is None


def test_backward_rejects_non_scalar():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.scale(t, 2.0))


def test_backward_visits_each_node_once_in_reverse_order():
    t = Tensor([[0.5, 1.0]], requires_grad=True)
    a = ad.exp(t)
    b = ad.mul(a, a)  # a is used twice
    loss = ad.sum(ad.add(b, a))
    seen = []
    ad.backward(loss, on_visit=lambda node: seen.append(node.seq))
    assert len(seen) == len(set(seen)) == 4
    assert seen == sorted(seen, reverse=True)


def test_interior_tensors_keep_no_grad():
    t = Tensor([1.0, 2.0], requires_grad=True)
    mid = ad.scale(t, 2.0)
    ad.backward(ad.sum(mid))
    assert mid.grad is None


def test_log_clamps_at_eps():
    out = ad.log(Tensor([0.0, 1e-20, 1.0]))
    np.testing.assert_allclose(out.data, [math.log(1e-12), math.log(1e-12), 0.0])


# ---------------------------------------------------------------- per-op examples (three apiece)


def test_add_sub_mul_examples():
    a, b = Tensor([1.0, -2.0]), Tensor([0.5, 4.0])
    np.testing.assert_array_equal(ad.add(a, b).data, [1.5, 2.0])
    np.testing.assert_array_equal(ad.sub(a, b).data, [0.5, -6.0])
    np.testing.assert_array_equal(ad.mul(a, b).data, [0.5, -8.0])
    # row-wise bias broadcast
    m = Tensor(np.zeros((2, 2)))
    np.testing.assert_array_equal(ad.add(m, Tensor([1.0, 2.0])).data, [[1, 2], [1, 2]])


def test_bias_broadcast_gradient_sums_rows():
    bias = Tensor([0.0, 0.0], requires_grad=True)
    ad.backward(ad.sum(ad.add(Tensor(np.ones((3, 2))), bias)))
    np.testing.assert_array_equal(bias.grad, [3.0, 3.0])


def test_scale_exp_relu_examples():
    np.testing.assert_array_equal(ad.scale(Tensor([1.0, -2.0]), -0.5).data, [-0.5, 1.0])
    np.testing.assert_allclose(ad.exp(Tensor([0.0, 1.0])).data, [1.0, math.e])
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_row_sum_mean_l2_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.row_sum(m).data, [3.0, 7.0])
    assert ad.mean(m).item() == 2.5
    np.testing.assert_allclose(ad.l2_norm(Tensor([[3.0, 4.0]]), axis=1).data, [5.0])
    assert ad.l2_norm(Tensor([3.0, 4.0])).item() == 5.0


def test_relu_gradient_is_step():
    t = Tensor([-1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(ad.relu(t)))
    np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0])


OPS = {
    "exp": lambda t: ad.sum(ad.exp(t)),
    "log": lambda t: ad.sum(ad.log(t)),
    "softmax": lambda t: ad.sum(ad.mul(ad.softmax(t), Tensor(np.arange(t.size).reshape(t.shape) + 1.0))),
    "row_sum": lambda t: ad.sum(ad.mul(ad.row_sum(t), ad.row_sum(t))),
    "mean": lambda t: ad.mul(ad.mean(t), ad.mean(t)),
    "l2_rows": lambda t: ad.sum(ad.l2_norm(t, axis=1)),
    "layer_norm": lambda t: ad.sum(ad.mul(ad.layer_norm(t), Tensor(np.linspace(-1, 1, t.size).reshape(t.shape)))),
    "relu": lambda t: ad.sum(ad.mul(ad.relu(t), t)),
    "composite": lambda t: ad.sum(ad.log(ad.softmax(ad.matmul(t, Tensor(np.ones((t.shape[1], 3))))))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference_per_op(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    for _ in range(5):
        x = rng.uniform(0.3, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        if name == "log":
            x = np.abs(x)
        build = OPS[name]
        g = analytic_grad(build, x)
        fd = fd_grad(lambda a: build(Tensor(a)).item(), x)
        assert rel_err(g, fd) < 1e-5


def test_oracle_covers_all_ops_at_100_points():
    worst = acceptance.gradient_oracle(n_points=100)
    assert set(worst) >= {"add", "sub", "mul", "scale", "log", "exp", "relu", "row_sum", "mean", "l2_norm",
                          "matmul", "softmax"}
    assert max(worst.values()) < 1e-5


def test_soundness_check_catches_identity_stop_gradient(monkeypatch):
    # a broken stop_gradient must be detected, otherwise the check proves nothing
    assert acceptance.stop_gradient_soundness(n_graphs=10)[1] == []
    monkeypatch.setattr(ad, "stop_gradient", lambda t: t)
    _, failures = acceptance.stop_gradient_soundness(n_graphs=10)
    assert failures


def test_determinism_bitwise():
    x = np.random.default_rng(5).standard_normal((4, 3))

    def grads():
        t = Tensor(x, requires_grad=True)
        loss = OPS["composite"](t)
        ad.backward(loss)
        return loss.data.tobytes() + t.grad.tobytes()

    assert grads() == grads()


# ---------------------------------------------------------------- properties

rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)),
              elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(rows)
def test_softmax_rows_are_distributions(u):
    p = ad.softmax(Tensor(u)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p > 0) and np.all(p <= 1)


@settings(max_examples=100, deadline=None)
@given(rows, st.floats(-100, 100))
def test_softmax_shift_invariance_property(u, c):
    np.testing.assert_allclose(ad.softmax(Tensor(u + c)).data, ad.softmax(Tensor(u)).data, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_isolated_leaf_gets_no_gradient(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    hidden = ad.stop_gradient(ad.softmax(ad.mul(b, b)))
    loss = ad.sum(ad.mul(ad.exp(a), hidden))
    ad.backward(loss)
    assert b.grad is None or not b.grad.any()
    assert a.grad is not None
