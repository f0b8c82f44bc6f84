import numpy as np
import pytest

from flowdistill import autodiff as ad


def test_constant_loss_has_zero_grads():
    p = ad.Var(np.ones(3))
    loss = ad.mean_all(p * 0.0)
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, np.zeros(3))


def test_quadratic_gradient_is_parameter():
    v = np.random.default_rng(0).standard_normal(7)
    p = ad.Var(v)
    loss = 0.5 * ad.sum_all(ad.square(p))
    ad.backward(loss)
    np.testing.assert_allclose(p.grad, v, rtol=0, atol=0)


def test_backward_rejects_non_scalar():
    p = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(p + 1.0)


def test_frozen_arrays_receive_no_grad():
    frozen = np.ones(4)
    p = ad.Var(np.full(4, 2.0))
    loss = ad.sum_all(p * frozen)
    ad.backward(loss)
    assert p.grad is not None
    assert not hasattr(frozen, "grad")


def test_mixed_ndarray_var_arithmetic_dispatch():
    arr = np.arange(3.0)
    p = ad.Var(np.ones(3))
    for expr in (arr + p, p + arr, arr - p, p - arr, arr * p, p * arr, 2.0 * p):
        assert isinstance(expr, ad.Var)
    loss = ad.sum_all(arr * p)
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, arr)


def test_reused_node_accumulates():
    p = ad.Var(np.array(3.0))
    loss = ad.sum_all(p * p + p)
    ad.backward(loss)
    assert float(p.grad) == pytest.approx(2 * 3.0 + 1.0)


def _fd_check(loss_fn, params, tol=1e-4):
    report = ad.gradcheck(loss_fn, params)
    assert report["max_rel_err"] < tol, report
    return report


def test_gradcheck_matmul_bias_silu():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 3))
    params = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}

    def loss(p):
        return ad.mean_all(ad.square(ad.silu(ad.matmul(x, p["w"]) + p["b"])))

    _fd_check(loss, params)


def test_gradcheck_batched_matmul():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6, 3))
    params = {"w": rng.standard_normal((3, 2))}

    def loss(p):
        return ad.sum_all(ad.square(ad.matmul(x, p["w"])))

    _fd_check(loss, params)


def test_gradcheck_embedding_rows():
    rng = np.random.default_rng(3)
    idx = np.array([0, 2, 2, 1])
    params = {"table": rng.standard_normal((4, 5))}

    def loss(p):
        rows = ad.take_rows(p["table"], idx)
        return ad.mean_all(ad.square(rows - 0.3))

    _fd_check(loss, params)


def test_take_rows_rejects_out_of_range():
    table = np.zeros((3, 2))
    with pytest.raises(IndexError):
        ad.take_rows(table, np.array([3]))


def test_gradcheck_temporal_mix():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((3, 6, 5))  # batch, frames, channels
    params = {"mix": rng.standard_normal((5, 6, 6)) * 0.3}

    def loss(p):
        return ad.mean_all(ad.square(h + ad.temporal_mix(p["mix"], h)))

    _fd_check(loss, params)


def test_temporal_mix_zero_weights_identity():
    h = np.random.default_rng(5).standard_normal((2, 4, 3))
    out = h + ad.temporal_mix(np.zeros((3, 4, 4)), h)
    assert np.array_equal(out, h)


def test_gradcheck_concat_sigmoid_log_clamp():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 4))
    params = {"u": rng.standard_normal((3, 4)), "v": rng.standard_normal((3, 2))}

    def loss(p):
        cat = ad.concat_last([p["u"], a, p["v"]])
        score = ad.sum_all(cat * 0.1)
        prob = ad.clamp(ad.sigmoid(score), 1e-6, 1 - 1e-6)
        return -ad.log(prob)

    _fd_check(loss, params)


def test_clamp_blocks_gradient_outside_range():
    p = ad.Var(np.array([0.5, 2.0, -1.0]))
    loss = ad.sum_all(ad.clamp(p, 0.0, 1.0))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [1.0, 0.0, 0.0])


def test_gradcheck_reshape_and_mean():
    rng = np.random.default_rng(7)
    params = {"w": rng.standard_normal((2, 3, 4))}

    def loss(p):
        flat = ad.reshape(p["w"], (2, 12))
        return ad.mean_all(ad.silu(flat))

    _fd_check(loss, params)


def test_broadcast_add_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 3, 5))
    params = {"b": rng.standard_normal(5), "row": rng.standard_normal((1, 1, 5))}

    def loss(p):
        return ad.mean_all(ad.square(x + p["b"] + p["row"]))

    _fd_check(loss, params)


def test_determinism_of_backward():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 4))
    w = rng.standard_normal((4, 4))

    def run():
        p = ad.Var(w)
        loss = ad.mean_all(ad.square(ad.silu(ad.matmul(x, p))))
        ad.backward(loss)
        return p.grad.copy()

    assert np.array_equal(run(), run())
