"""Finite-difference checks and contract tests for the autodiff core."""

import threading

import numpy as np
import pytest

from sparsespeech import autodiff as ad
from sparsespeech.errors import ContractError, NumericError


def leaf(rng, *shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True)


def check(f, params, tolerance=1e-4):
    report = ad.grad_check(f, params, tolerance=tolerance)
    assert report.passed, "max rel error %.3g (per param: %s)" % (
        report.max_rel_error, report.per_param)


def test_add_sub_mul_same_shape():
    rng = np.random.default_rng(0)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    check(lambda: ad.mean(ad.mul(ad.add(a, b), ad.sub(a, b))), {"a": a, "b": b})


def test_row_broadcast():
    rng = np.random.default_rng(1)
    a = leaf(rng, 4, 3)
    row = leaf(rng, 3)
    check(lambda: ad.mean(ad.mul(ad.add(a, row), ad.sub(a, row))),
          {"a": a, "row": row})


def test_scalar_broadcast():
    rng = np.random.default_rng(2)
    a = leaf(rng, 2, 5)
    s = ad.Tensor(np.asarray(0.7), requires_grad=True)
    check(lambda: ad.mean(ad.mul(a, s)), {"a": a, "s": s})


def test_bad_broadcast_rejected():
    a = ad.Tensor(np.zeros((3, 4)))
    b = ad.Tensor(np.zeros((4, 3)))
    with pytest.raises(ContractError):
        ad.add(a, b)
    with pytest.raises(ContractError):
        ad.mul(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros((2, 3))))


def test_matmul_grad():
    rng = np.random.default_rng(3)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, 2)
    check(lambda: ad.mean(ad.matmul(a, b)), {"a": a, "b": b})


def test_matmul_shape_error():
    with pytest.raises(ContractError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


def test_concat_and_slice():
    rng = np.random.default_rng(4)
    a = leaf(rng, 2, 3)
    b = leaf(rng, 2, 3)

    def f():
        cat = ad.concat([a, b], axis=1)
        return ad.mean(ad.mul(cat[:, 1:4], cat[:, 2:5]))

    check(f, {"a": a, "b": b})


def test_concat_axis0_grad():
    rng = np.random.default_rng(5)
    a = leaf(rng, 2, 3)
    b = leaf(rng, 1, 3)
    check(lambda: ad.mean(ad.concat([a, b], axis=0)), {"a": a, "b": b})


def test_unary_ops():
    rng = np.random.default_rng(6)
    a = leaf(rng, 3, 3)
    check(lambda: ad.mean(ad.sigmoid(a)), {"a": a})
    check(lambda: ad.mean(ad.tanh(a)), {"a": a})
    check(lambda: ad.mean(ad.exp(a)), {"a": a})
    pos = ad.Tensor(np.abs(np.random.default_rng(7).normal(size=(3, 3))) + 0.5,
                    requires_grad=True)
    check(lambda: ad.mean(ad.log(pos)), {"pos": pos})


def test_softmax_and_log_softmax():
    rng = np.random.default_rng(8)
    a = leaf(rng, 4, 5)
    w = ad.Tensor(rng.normal(size=(4, 5)))
    check(lambda: ad.mean(ad.mul(ad.softmax(a), w)), {"a": a})
    check(lambda: ad.mean(ad.mul(ad.log_softmax(a), w)), {"a": a})


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    out = ad.softmax(ad.Tensor(rng.normal(size=(6, 4)) * 30.0))
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_reductions_and_square_error():
    rng = np.random.default_rng(10)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    check(lambda: ad.mean(ad.total(ad.mul(a, a), axis=1)), {"a": a})
    check(lambda: ad.mul(ad.square_error(a, b), 0.1), {"a": a, "b": b})


def test_rowmax_grad_routes_to_argmax():
    x = ad.Tensor(np.array([[1.0, 3.0, 2.0], [5.0, 0.0, 4.0]]), requires_grad=True)
    loss = ad.mean(ad.rowmax(x))
    grads = ad.backward(loss)
    expected = np.zeros((2, 3))
    expected[0, 1] = 0.5
    expected[1, 0] = 0.5
    assert np.array_equal(grads[x], expected)


def test_diamond_graph_accumulates():
    # y = x*x + x*x: the two branches must both contribute.
    x = ad.Tensor(np.asarray([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    grads = ad.backward(ad.total(y))
    assert np.allclose(grads[x], 8.0)


def test_backward_twice_rejected():
    x = ad.Tensor(np.asarray([1.0]), requires_grad=True)
    loss = ad.total(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ContractError):
        ad.backward(loss)


def test_backward_needs_scalar():
    x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.mul(x, 2.0))


def test_no_grad_blocks_recording():
    x = ad.Tensor(np.asarray([1.0, 2.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad
    assert ad.backward(ad.total(ad.mul(x, 1.0))) != {}


def test_no_grad_is_thread_local():
    # concurrent workers toggling eval mode must not leak it into other
    # threads or leave it disabled after they finish
    x = ad.Tensor(np.asarray([1.0]), requires_grad=True)
    errors = []

    def worker():
        for _ in range(200):
            with ad.no_grad():
                if ad.mul(x, 2.0).requires_grad:
                    errors.append("recorded inside no_grad")
            if not ad.mul(x, 2.0).requires_grad:
                errors.append("mode stuck off after exit")

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert ad.mul(x, 2.0).requires_grad


def test_backward_without_grad_leaves_rejected():
    with ad.no_grad():
        y = ad.total(ad.mul(ad.Tensor(np.asarray([1.0, 2.0])), 2.0))
    with pytest.raises(ContractError):
        ad.backward(y)


def test_tensor_rejects_nonfinite_and_3d():
    with pytest.raises(ContractError):
        ad.Tensor(np.array([np.inf]))
    with pytest.raises(ContractError):
        ad.Tensor(np.zeros((2, 2, 2)))


def test_nonfinite_op_result_raises_numeric_error():
    x = ad.Tensor(np.asarray([1000.0]))
    with pytest.raises(NumericError):
        ad.exp(x)
    with pytest.raises(NumericError) as info:
        ad.log(ad.Tensor(np.asarray([0.0])))
    assert "log" in str(info.value)


def test_custom_node_backward():
    x = ad.Tensor(np.asarray([[1.0, 2.0]]), requires_grad=True)
    tripled = ad.custom("triple", x.data * 3.0, (x,), lambda g: (g * 3.0,))
    grads = ad.backward(ad.total(tripled))
    assert np.allclose(grads[x], 3.0)


def test_grad_check_rejects_nondeterministic():
    rng = np.random.default_rng(11)
    x = ad.Tensor(np.asarray([1.0]), requires_grad=True)

    def f():
        return ad.total(ad.mul(x, float(rng.random())))

    with pytest.raises(ContractError):
        ad.grad_check(f, {"x": x})


def test_grad_check_catches_wrong_gradient():
    x = ad.Tensor(np.asarray([1.5]), requires_grad=True)

    def f():
        return ad.total(ad.custom("bad_double", x.data * 2.0, (x,),
                                  lambda g: (g * 5.0,)))

    report = ad.grad_check(f, {"x": x})
    assert not report.passed
