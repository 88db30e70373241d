import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import fd_grad, fd_jacobian, rel_err
from hjbvisc.autodiff import (Blocks, NonFiniteError, ParamVector, UnsupportedCapability, Var, check_finite,
                              concat, eval_jet, eval_jets, loss_param_grad, matmul, stack, symmetrize,
                              transpose)
from hjbvisc.networks import ConvexNet, PartialConvexNet, SmoothMLP
from hjbvisc.problems import builtin_problem
from hjbvisc.training import SampleBatch, loss_method1, method1_parts


def _tape_grad(f, x):
    v = Var(np.array(x, dtype=np.float64))
    out = f(v)
    out.backward()
    return v.grad


# --- tape primitives ---------------------------------------------------------


@pytest.mark.parametrize("op", [
    lambda v: (v * v).sum(),
    lambda v: (v.tanh() * 3.0 - v).sum(),
    lambda v: v.sigmoid().mean(),
    lambda v: v.softplus().sum(),
    lambda v: ((v + 1.5).relu() * v).sum(),
    lambda v: ((v - 0.1).clip_max0() * (v - 0.1).clip_max0()).sum(),
    lambda v: (v.reshape(2, 3)[1] / 4.0).sum(),
    lambda v: (2.0 - v[[0, 0, 2]]).sum(),
    lambda v: matmul(v.reshape(2, 3), transpose(v.reshape(2, 3))).sum(),
    lambda v: (stack([v[0:2], v[2:4]], axis=0) * concat([v[4:6], v[0:2]], axis=0).reshape(2, 2)).sum(),
])
def test_tape_primitives_match_fd(op, rng):
    x = rng.normal(size=6)
    f = lambda z: float(op(Var(z)).data)
    assert rel_err(_tape_grad(op, x), fd_grad(f, x)) < 1e-6


def test_ndarray_on_left_dispatches_to_var():
    v = Var(np.ones(3))
    out = np.arange(3.0) * v
    assert isinstance(out, Var)
    out.sum().backward()
    np.testing.assert_array_equal(v.grad, np.arange(3.0))


def test_relu_derivative_at_zero_is_zero():
    v = Var(np.zeros(2))
    v.relu().sum().backward()
    np.testing.assert_array_equal(v.grad, 0.0)


def test_batched_matmul_weight_gradient():
    rng = np.random.default_rng(0)
    W = Var(rng.normal(size=(4, 3)))
    X = rng.normal(size=(5, 3, 2))
    out = matmul(W, X)
    (out * out).sum().backward()
    ref = np.einsum("bnd,bkd->nk", 2 * np.einsum("nk,bkd->bnd", W.data, X), X)
    np.testing.assert_allclose(W.grad, ref, rtol=1e-12)


def test_symmetrize_is_bitwise_symmetric(rng):
    h = rng.normal(size=(7, 3, 3))
    s = symmetrize(h)
    assert np.array_equal(s, np.swapaxes(s, -1, -2))


# --- parameter vectors -------------------------------------------------------


def test_param_vector_layout_must_cover_values():
    with pytest.raises(ValueError):
        ParamVector(np.zeros(5), [("a", 0, (2,)), ("b", 2, (2,))])
    with pytest.raises(ValueError):
        ParamVector(np.zeros(4), [("a", 0, (2,)), ("b", 1, (3,))])


def test_param_vector_blocks_are_views():
    p = ParamVector.from_shapes([("W", (2, 2)), ("b", (2,))])
    p.block("W")[...] = 1.0
    assert p.values[:4].sum() == 4.0 and p.names() == ["W", "b"] and len(p) == 6


# --- network jets ------------------------------------------------------------


NETS = [
    lambda d: SmoothMLP(d, (5, 4)),
    lambda d: SmoothMLP(d, (6,), activation="softplus", quadratic_head=True),
    lambda d: ConvexNet(d, 7, activation="softplus"),
    lambda d: PartialConvexNet(d - 1, 6, latent=3, ctx=4, sub_hidden=5, activation="softplus", t_range=(0, 2)),
]


@pytest.mark.parametrize("make", NETS)
@pytest.mark.parametrize("d", [2, 3])
def test_input_gradient_and_hessian_match_fd(make, d, rng):
    net = make(d)
    params = net.init_params(rng)
    for _ in range(5):
        x = rng.uniform(-1, 1, d)
        jet = eval_jet(net, params, x)
        f = lambda z: float(net(params, z[None, :])[0])
        assert abs(jet.value - f(x)) < 1e-14
        assert rel_err(jet.grad, fd_grad(f, x)) < 1e-6
        g = lambda z: eval_jet(net, params, z, hessian=False).grad
        assert rel_err(jet.hess, fd_jacobian(g, x)) < 1e-6
        assert np.array_equal(jet.hess, jet.hess.T)


def test_relu_network_refuses_hessian():
    net = ConvexNet(2, 4)
    params = net.init_params(np.random.default_rng(0))
    with pytest.raises(UnsupportedCapability):
        eval_jet(net, params, [0.1, 0.2])
    jet = eval_jet(net, params, [0.1, 0.2], hessian=False)
    assert jet.hess is None and not jet.hess_defined


def test_dimension_mismatch_is_rejected():
    net = SmoothMLP(2, (3,))
    params = net.init_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        eval_jet(net, params, [0.1, 0.2, 0.3])


def test_batched_jets_agree_with_pointwise(rng):
    net = SmoothMLP(2, (5, 5))
    params = net.init_params(rng)
    X = rng.uniform(-1, 1, (6, 2))
    jets = eval_jets(net, params, X, hessian=True)
    for i in range(6):
        one = eval_jet(net, params, X[i])
        np.testing.assert_allclose(jets.grad[i], one.grad, rtol=0, atol=1e-15)
        np.testing.assert_allclose(jets.hess[i], one.hess, rtol=0, atol=1e-15)


# --- parameter gradients through losses --------------------------------------


def test_param_gradient_through_method1_loss(rng):
    problem = builtin_problem("ex1")
    net = SmoothMLP(2, (6, 5))
    params = net.init_params(rng)
    Z = rng.uniform(-1, 1, (12, 2))
    batch = SampleBatch(Z, np.zeros((1, 2)), np.zeros(1), Z[:8].copy())
    assert float(method1_parts(net, Blocks(params), problem, batch).penalty.data) > 0  # penalty active
    lg = loss_param_grad(lambda bl: method1_parts(net, bl, problem, batch).total, params)
    fd = fd_grad(lambda th: loss_method1(net, params.with_values(th), problem, batch), params.values)
    assert rel_err(lg.grad, fd) < 1e-4


def test_non_var_loss_gives_zero_gradient():
    p = ParamVector.from_shapes([("a", (3,))])
    assert not loss_param_grad(lambda bl: 0.0, p).grad.any()


def test_non_finite_loss_raises():
    p = ParamVector.from_shapes([("a", (2,))])
    with pytest.raises(NonFiniteError):
        loss_param_grad(lambda bl: (bl["a"] + np.inf).sum(), p)


def test_check_finite_names_offending_point():
    with pytest.raises(NonFiniteError) as info:
        check_finite(np.array([1.0, np.inf]), np.array([[0.0], [0.5]]), "residual")
    assert "0.5" in str(info.value) and info.value.index == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_softplus_tape_gradient_is_sigmoid(xs):
    x = np.array(xs)
    g = _tape_grad(lambda v: v.softplus().sum(), x)
    np.testing.assert_allclose(g, 1 / (1 + np.exp(-x)), rtol=1e-12, atol=1e-15)
