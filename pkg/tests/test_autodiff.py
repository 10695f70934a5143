import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coconut_cil import autodiff as ad
from coconut_cil.autodiff import Tensor, backward, no_grad, op_forward
from coconut_cil.gradcheck import grad_check
from coconut_cil.optim import AdamW


def P(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def test_matmul_identity():
    out = op_forward("matmul", [Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]])])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    out = op_forward("row-softmax", [Tensor([[0.0, 0.0, 0.0]])])
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_l2_normalize_345():
    out = op_forward("l2-normalize-rows", [Tensor([[3.0, 4.0]])])
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_log_and_normalize_reject_bad_input():
    with pytest.raises(ValueError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        ad.l2_normalize(Tensor([[0.0, 0.0]]))


def test_unknown_op():
    with pytest.raises(ValueError):
        op_forward("conv", [Tensor(1.0)])


def test_backward_quadratic():
    w = P([1.0, 2.0])
    backward(ad.sum(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates_over_reuse():
    w = P([0.5, -1.0, 3.0])
    backward(ad.sum(ad.add(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])


def test_backward_constant_loss_leaves_no_grad():
    w = P([1.0])
    loss = ad.sum(Tensor([1.0, 2.0]))
    backward(loss)
    assert w.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        backward(P([1.0, 2.0]) * 2.0)


def test_non_grad_tensor_never_accumulates():
    c = Tensor([1.0, 2.0])
    w = P([3.0, 4.0])
    backward(ad.sum(c * w))
    assert c.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


def test_no_grad_records_nothing():
    w = P([1.0, 2.0])
    with no_grad():
        y = ad.sum(w * w)
    assert y.node is None and not y.requires_grad


def test_graph_ids_are_topological():
    w = P(np.ones((2, 2)))
    y = ad.sum(ad.exp(ad.matmul(w, w)))
    seen = set()
    for t in ad._reachable(y)[::-1]:
        for i in t.node.inputs:
            if i.node is not None:
                assert i.node.id < t.node.id
        seen.add(t.node.id)
    assert len(seen) == 3


def test_grad_check_quadratic_tight():
    w = P(np.random.default_rng(0).standard_normal(5))
    errs = grad_check(lambda: ad.sum(w * w), [w], h=1e-4, extended=False)
    assert errs[0] < 1e-6


def test_grad_check_empty_and_nonfinite():
    assert grad_check(lambda: Tensor(1.0), []) == []
    w = P([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: ad.scale(w, np.inf), [w])


def test_grad_check_rejects_bad_h():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), [P([1.0])], h=0)


def _op_cases(rng):
    a = P(rng.standard_normal((3, 4)))
    b = P(rng.standard_normal((4, 2)))
    c = P(rng.standard_normal((3, 4)))
    pos = P(rng.uniform(0.5, 2.0, (3, 4)))
    ids = np.array([2, 0, 2, 1])
    w = rng.standard_normal((3, 4))
    return {
        "matmul": (lambda: ad.sum(ad.matmul(a, b) * rng_w(3, 2)), [a, b]),
        "add": (lambda: ad.sum(ad.add(a, c) * w), [a, c]),
        "subtract": (lambda: ad.sum(ad.subtract(a, c) * w), [a, c]),
        "multiply": (lambda: ad.sum(ad.multiply(a, c)), [a, c]),
        "broadcast-add": (lambda: ad.sum(ad.add(a, ad.reshape(ad.sum(c, axis=0), (1, 4))) * w), [a, c]),
        "scale": (lambda: ad.sum(ad.scale(a, 2.5) * w), [a]),
        "exp": (lambda: ad.sum(ad.exp(a) * w), [a]),
        "log": (lambda: ad.sum(ad.log(pos) * w), [pos]),
        "softmax": (lambda: ad.sum(ad.softmax(a) * w), [a]),
        "log_softmax": (lambda: ad.sum(ad.log_softmax(a) * w), [a]),
        "logsumexp": (lambda: ad.sum(ad.logsumexp(a) * w[:, 0]), [a]),
        "l2norm": (lambda: ad.sum(ad.l2_normalize(a) * w), [a]),
        "mean": (lambda: ad.sum(ad.mean(a, axis=1) * w[:, 0]), [a]),
        "concat": (lambda: ad.sum(ad.concatenate([a, c], axis=1) * np.hstack([w, -w])), [a, c]),
        "gather": (lambda: ad.sum(ad.gather_rows(a, [2, 2, 0]) * w), [a]),
        "transpose": (lambda: ad.sum(ad.transpose(a) * w.T), [a]),
        "relu": (lambda: ad.sum(ad.relu(a) * w), [a]),
        "embedding": (lambda: ad.sum(ad.embedding_lookup(a, ids) * rng_w(4, 4)), [a]),
        "masked_fill": (lambda: ad.sum(ad.masked_fill(a, w > 0, -3.0) * c.data), [a]),
        "take_last": (lambda: ad.sum(ad.take_last(a, np.array([0, 3, 1]))), [a]),
    }


_W = {}


def rng_w(*shape):
    if shape not in _W:
        _W[shape] = np.random.default_rng(sum(shape)).standard_normal(shape)
    return _W[shape]


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (fn, params) in _op_cases(rng).items():
        errs = grad_check(fn, params, h=1e-4)
        assert max(errs) < 1e-4, (name, errs)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(n, m, shift, seed):
    x = np.random.default_rng(seed).standard_normal((n, m)) * 10 + shift
    s = ad.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_normalized_rows_have_unit_norm(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d)) * 100
    x = x[np.linalg.norm(x, axis=1) > 1e-10]
    if len(x):
        y = ad.l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    w = P(rng.standard_normal((3, 3)))
    L1 = lambda: ad.sum(ad.exp(ad.matmul(w, w)) * 0.1)
    L2 = lambda: ad.sum(ad.log_softmax(w))
    backward(ad.add(ad.scale(L1(), alpha), ad.scale(L2(), beta)))
    combined = w.grad.copy()
    w.zero_grad()
    backward(L1())
    g1 = w.grad.copy()
    w.zero_grad()
    backward(L2())
    np.testing.assert_allclose(combined, alpha * g1 + beta * w.grad, rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    p = P([1.0, -2.0])
    opt = AdamW({"p": p}, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adamw_first_step_unit_gradient():
    p = P(0.0)
    opt = AdamW({"p": p}, lr=5e-4, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=0.0)
    p.grad = np.array(1.0)
    opt.step()
    assert p.data == pytest.approx(-5e-4 / (1 + 1e-6), abs=1e-15)


def test_adamw_decoupled_decay():
    p = P([2.0, -4.0])
    opt = AdamW({"p": p}, lr=5e-4, weight_decay=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 5e-4 * 0.1), rtol=0, atol=1e-15)


def test_adamw_rejects_nonfinite_gradient_with_name():
    p = P([1.0])
    opt = AdamW({"enc.w": p})
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="enc.w"):
        opt.step()


def test_adamw_moments_start_at_zero_and_counter_increments():
    p = P(np.ones((2, 2)))
    opt = AdamW({"p": p})
    assert not opt.m["p"].any() and not opt.v["p"].any()
    for k in range(3):
        p.grad = np.ones((2, 2))
        opt.step()
        assert opt.step_count == k + 1
