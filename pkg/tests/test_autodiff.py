import numpy as np
import pytest

from emae import autodiff as ad
from emae import gradcheck
from emae.errors import InvalidConfiguration, ShapeError
from oracles import central_differences


def test_matmul_identity():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, np.eye(2)).data, [[1, 2], [3, 4]])


def test_sum_square_gradient():
    x = ad.parameter([1.0, -2.0, 3.0])
    ad.sum_(ad.square(x)).backward()
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])


def test_softmax_cross_entropy_matches_finite_differences():
    g = np.random.default_rng(0)
    x0 = g.normal(size=(3, 5))
    onehot = np.eye(5)[[1, 4, 0]]

    def loss(t):
        return -ad.mean(ad.sum_(ad.mul(ad.log_softmax(t), onehot), axis=-1))

    x = ad.parameter(x0)
    loss(x).backward()
    numeric = central_differences(lambda v: loss(ad.Tensor(v)).item(), x0, h=1e-5)
    rel = np.abs(x.grad - numeric) / np.maximum(np.maximum(np.abs(x.grad), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-6


def test_stop_gradient_blocks():
    x = ad.parameter([1.0, 2.0])
    y = ad.stop_gradient(x)
    assert np.array_equal(y.data, x.data)
    ad.sum_(ad.mul(y, 1.0) + ad.mul(x, 0.0)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_stop_gradient_product_gives_x_not_2x():
    x = ad.parameter([0.5, -1.5, 3.0])
    ad.sum_(ad.mul(x, ad.stop_gradient(x))).backward()
    assert np.array_equal(x.grad, x.data)


def test_stop_gradient_only_path_leaves_grad_empty():
    x = ad.parameter([1.0, 2.0])
    y = ad.sum_(ad.stop_gradient(x))
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.backward()


def test_fan_out_accumulates():
    x = ad.parameter([1.0, 2.0])
    y = ad.add(ad.mul(x, 3.0), ad.square(x))
    ad.sum_(ad.add(y, x)).backward()
    assert np.allclose(x.grad, 3.0 + 2 * x.data + 1.0)


def test_backward_twice_raises():
    x = ad.parameter([1.0, 2.0])
    y = ad.sum_(ad.square(x))
    y.backward()
    first = x.grad.copy()
    with pytest.raises(RuntimeError):
        y.backward()
    assert np.array_equal(x.grad, first)


def test_fresh_graph_resets_grads():
    x = ad.parameter([1.0, 2.0])
    ad.sum_(x).backward()
    ad.sum_(ad.mul(x, 2.0)).backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    x = ad.parameter([1.0])
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad


def test_abs_subgradient_zero():
    x = ad.parameter([0.0, -2.0, 3.0])
    ad.sum_(ad.abs_(x)).backward()
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


def test_shape_errors_mention_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))


def test_layer_norm_eps_validation():
    with pytest.raises(InvalidConfiguration):
        ad.layer_norm(ad.Tensor(np.ones((2, 3))), eps=0.0)


def test_layer_norm_forward():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = ad.layer_norm(ad.Tensor(x)).data
    assert abs(out.mean()) < 1e-12
    assert np.isclose(out.var(), 1.0, atol=1e-5)


def test_gather_scatter_roundtrip():
    x = np.arange(24.0).reshape(2, 4, 3)
    idx = np.array([[2, 0], [3, 1]])
    got = ad.gather_rows(ad.Tensor(x), idx).data
    assert np.array_equal(got[0], x[0, [2, 0]])
    back = ad.scatter_rows(ad.Tensor(got), idx, 4).data
    assert np.array_equal(back[1, 3], x[1, 3])
    assert np.array_equal(back[1, 0], np.zeros(3))


def test_grad_check_sum_exact():
    rep = ad.grad_check(lambda t: ad.sum_(t), np.random.default_rng(1).normal(size=(3, 4)))
    assert np.allclose(rep.analytic, 1.0)
    assert rep.max_rel_error < 1e-9 and rep.passed


def test_grad_check_mean_abs_away_from_kinks():
    g = np.random.default_rng(2)
    c = g.normal(size=6)
    x = c + np.where(g.random(6) < 0.5, -1, 1) * g.uniform(0.1, 1.0, size=6)
    rep = ad.grad_check(lambda t: ad.mean(ad.abs_(ad.sub(t, c))), x, tol=1e-4)
    assert rep.passed and np.all(rep.element_passed)


def test_grad_check_detects_wrong_gradient():
    rep = ad.grad_check(lambda t: ad.sum_(ad.mul(t, ad.stop_gradient(t))), np.array([1.0, 2.0]))
    assert not rep.passed
    assert np.allclose(rep.max_rel_error, 0.5)


@pytest.mark.parametrize("h,tol", [(1e-8, 1e-5), (1e-2, 1e-5), (1e-5, 0.0)])
def test_grad_check_validates_arguments(h, tol):
    with pytest.raises(InvalidConfiguration):
        ad.grad_check(lambda t: ad.sum_(t), np.ones(2), h=h, tol=tol)


def test_grad_check_rejects_non_scalar():
    with pytest.raises(InvalidConfiguration):
        ad.grad_check(lambda t: ad.square(t), np.ones(3))


def test_registered_ops_pass_suite():
    results = gradcheck.run_op_suite(tol=1e-5)
    assert {r.name for r in results} == set(gradcheck.OP_NAMES)
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad


def test_total_loss_tiny_model_passes():
    results = gradcheck.run_loss_suite(tol=1e-3, draws=3)
    assert all(r.passed for r in results)
    assert all(r.checked > 0 for r in results)
