import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_grad, rel_err, small_net
from ngembed.errors import ConstructionError, NonFiniteError
from ngembed.params import (Architecture, FunctionBasis, SineBasis, build, eval_jet,
                            separable_views)


def test_zero_hidden_layers_counts_output_weights_only():
    arch = Architecture(1, 2, widths=(), period=(2.0,), periodic_width=7)
    net, theta = build(arch, 0)
    # periodic layer: amp, phase (7x1 each) and offset (7); output 7x2
    assert net.n_params == 7 + 7 + 7 + 7 * 2
    assert net.n_beta == 2 * 7
    no_period = Architecture(3, 2, widths=())
    net, theta = build(no_period, 0)
    assert net.n_params == 2 * 3 == theta.size


def test_burgers_architecture_hand_count():
    arch = Architecture(1, 1, widths=(10, 10), period=(2.0,), periodic_width=10)
    net, theta = build(arch, 0)
    periodic = 10 + 10 + 10
    dense = 2 * (10 * 10 + 10)
    assert net.n_params == periodic + dense + 10 == theta.size == 260
    assert net.n_alpha == 250 and net.n_beta == 10


def test_same_seed_bitwise_identical():
    arch = Architecture(2, 2, widths=(5, 5), period=(8.0, 8.0), periodic_width=6)
    a = build(arch, 7)[1]
    b = build(arch, 7)[1]
    c = build(arch, 8)[1]
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("arch", [
    Architecture(1, 1, widths=(0,)),
    Architecture(1, 1, period=(0.0,)),
    Architecture(2, 1, period=(1.0,)),
    Architecture(1, 1, activation="relu"),
    Architecture(0, 1),
])
def test_inconsistent_architecture_raises(arch):
    with pytest.raises(ConstructionError):
        build(arch, 0)


def test_layout_is_bijection():
    net, theta = small_net(d=2, m=2)
    parts = net.layout.unflatten(theta)
    assert sum(v.size for v in parts.values()) == net.n_params
    np.testing.assert_array_equal(net.layout.flatten(parts), theta)


def test_linear_parametrization_jet():
    net = FunctionBasis([lambda x: 1.0 + 0.0 * x, lambda x: jnp.sin(jnp.pi * x)])
    theta = np.array([0.3, -1.7])
    for x in [-0.8, 0.0, 0.25, 0.9]:
        jet = eval_jet(net, theta, x, order=1, with_param_grads=True)
        np.testing.assert_allclose(jet.grad_theta[0], [1.0, np.sin(np.pi * x)], atol=1e-15)
        np.testing.assert_allclose(jet.du[0, 0], theta[1] * np.pi * np.cos(np.pi * x), atol=1e-14)
        np.testing.assert_allclose(jet.value[0], theta[0] + theta[1] * np.sin(np.pi * x), atol=1e-15)


def test_zero_theta_bias_free_output_is_zero():
    net, theta = small_net()
    theta = np.zeros_like(theta)
    jet = eval_jet(net, theta, np.linspace(-1, 1, 9)[:, None], order=2)
    assert np.all(jet.value == 0) and np.all(jet.du == 0) and np.all(jet.d2u == 0)


def test_unrequested_fields_absent():
    net, theta = small_net()
    jet = eval_jet(net, theta, 0.1, order=0)
    assert jet.du is None and jet.d2u is None and jet.grad_theta is None
    jet = eval_jet(net, theta, 0.1, order=1, with_param_grads=True)
    assert jet.d2u is None and jet.grad_theta_of_du is not None


def test_nan_theta_raises():
    net, theta = small_net()
    theta[3] = np.nan
    with pytest.raises(NonFiniteError):
        eval_jet(net, theta, 0.1)


def _jet_fd_check(net, theta, X):
    jet = eval_jet(net, theta, X, order=2, with_param_grads=True)
    # parameter gradients of u and du
    g_fd = fd_grad(lambda t: net.forward(t, X, 0)[0], theta)
    assert rel_err(jet.grad_theta, g_fd) <= 1e-6
    gd_fd = fd_grad(lambda t: net.forward(t, X, 1)[1], theta)
    assert rel_err(jet.grad_theta_of_du, gd_fd) <= 1e-6
    # spatial derivatives
    d = net.input_dim
    h = 1e-5
    du_fd = np.zeros_like(jet.du)
    d2u_fd = np.zeros_like(jet.d2u)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        du_fd[..., j] = (net.forward(theta, X + e, 0)[0] - net.forward(theta, X - e, 0)[0]) / (2 * h)
        d2u_fd[..., j] = (net.forward(theta, X + e, 1)[1] - net.forward(theta, X - e, 1)[1]) / (2 * h)
    assert rel_err(jet.du, du_fd) <= 1e-6
    assert rel_err(jet.d2u, d2u_fd) <= 1e-6
    np.testing.assert_allclose(jet.d2u, np.swapaxes(jet.d2u, -1, -2), atol=1e-13)


@pytest.mark.parametrize("d,m", [(1, 1), (1, 2), (2, 2)])
def test_jets_match_finite_differences(d, m):
    rng = np.random.default_rng(d * 10 + m)
    for seed in range(3):
        net, theta = small_net(d=d, m=m, seed=seed)
        theta = theta + 0.3 * rng.standard_normal(theta.size)
        X = rng.uniform(-1, 1, (5, d))
        _jet_fd_check(net, theta, X)


def test_hundred_random_draws_param_gradient_fd():
    rng = np.random.default_rng(5)
    net, _ = small_net(d=1, m=2, widths=(4, 3), periodic_width=3)
    worst = 0.0
    for _ in range(100):
        theta = rng.standard_normal(net.n_params)
        x = rng.uniform(-1, 1, (1, 1))
        g = net.param_jacobian(theta, x)
        worst = max(worst, rel_err(g, fd_grad(lambda t: net.forward(t, x)[0], theta)))
    assert worst <= 1e-6


def test_handwritten_jacobian_matches_autodiff():
    net, theta = small_net(d=2, m=2, seed=3)
    X = np.random.default_rng(0).uniform(-1, 1, (11, 2))
    from ngembed.params import Parametrization
    np.testing.assert_allclose(net.param_jacobian(theta, X),
                               Parametrization.param_jacobian(net, theta, X), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), x=st.floats(-3.0, 3.0), axis=st.integers(0, 1))
def test_periodicity(seed, x, axis):
    L = (2.0, 8.0)
    net, theta = small_net(d=2, m=2, period=L, seed=seed)
    X = np.array([[x, 0.5 * x]])
    Y = X.copy()
    Y[0, axis] += L[axis]
    assert np.max(np.abs(net(theta, X) - net(theta, Y))) <= 1e-12


def test_separable_views_sine_example():
    net = SineBasis(1)
    theta = np.array([1.3, 0.7])
    views = separable_views(net, theta)
    X = np.array([[0.2], [-0.5]])
    np.testing.assert_allclose(views.V(X)[:, 0, 0], np.sin(1.3 * X[:, 0]), atol=1e-15)
    np.testing.assert_allclose(views.dalpha_V_beta(X)[:, 0, 0], 0.7 * X[:, 0] * np.cos(1.3 * X[:, 0]),
                               atol=1e-15)


def test_separable_identity_and_kronecker_blocks():
    net, theta = small_net(d=1, m=2, seed=4)
    X = np.linspace(-1, 1, 13)[:, None]
    views = separable_views(net, theta)
    V = views.V(X)
    u = net(theta, X)
    assert np.max(np.abs(u - V @ views.beta)) <= 1e-13
    phi = net.features(theta, X)[0]
    nb = net.n_basis
    oracle = np.zeros((len(X), 2, 2 * nb))
    for i in range(nb):
        for k in range(2):
            oracle[:, k, i * 2 + k] = phi[:, i]
    np.testing.assert_array_equal(V, oracle)
    assert V.shape[1:] == (2, 2 * nb)


def test_separable_views_rejects_output_bias():
    net, theta = small_net(output_bias=True)
    assert not net.separable
    with pytest.raises(ConstructionError):
        separable_views(net, theta)
