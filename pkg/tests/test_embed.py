import jax.numpy as jnp
import numpy as np
import pytest
import scipy.optimize

from conftest import fd_grad, rel_err, small_net
from ngembed.embed import ConstraintSet, constraint_jacobian, constraint_residual, embed
from ngembed.errors import NonconvergenceError
from ngembed.models import Quantity, SampleSet, burgers, estimate_quantity, wave
from ngembed.params import FunctionBasis

GRID = SampleSet.equidistant(((-1.0, 1.0),), 16, "quantity")
MASS = Quantity("mass", lambda u, du=None: u[..., 0])
SQUARE = Quantity("l2", lambda u, du=None: u[..., 0] ** 2)


def linear_net():
    return FunctionBasis([lambda x: 1.0 + 0.0 * x, lambda x: jnp.sin(jnp.pi * x)])


def test_residual_definition():
    net = linear_net()
    theta0 = np.array([0.4, -1.1])
    cs = ConstraintSet(net, [MASS], GRID).freeze(theta0)
    assert np.all(cs.residual(theta0) == 0)
    theta = np.array([1.5, 2.0])
    # mean of sin over the symmetric grid vanishes
    np.testing.assert_allclose(cs.residual(theta), [1.5 - 0.4], atol=1e-15)
    cs2 = ConstraintSet(net, [MASS, SQUARE], GRID).freeze(theta0)
    assert cs2.residual(theta).shape == (2,) and len(cs2) == 2 and cs2.names == ["mass", "l2"]


def test_residual_with_explicit_targets_and_unset_targets():
    net = linear_net()
    q = MASS.with_target(0.25)
    np.testing.assert_allclose(constraint_residual([1.0, 3.0], [q], net, GRID), [0.75], atol=1e-15)
    with pytest.raises(ValueError):
        constraint_residual([1.0, 3.0], [MASS], net, GRID)


def test_jacobian_linear_constant_rows():
    net = linear_net()
    J1 = constraint_jacobian([0.1, 0.2], [MASS], net, GRID)
    J2 = constraint_jacobian([7.0, -3.0], [MASS], net, GRID)
    np.testing.assert_allclose(J1, J2, atol=1e-16)
    np.testing.assert_allclose(J1, [[1.0, 0.0]], atol=1e-15)


def test_jacobian_finite_differences():
    model = wave(c=1.2)
    net, theta = small_net(m=2, seed=3)
    S = SampleSet.random(model.domain, 20, seed=1)
    qs = [model.quantity("hamiltonian"), Quantity("mass", lambda u, du=None: u[..., 0])]
    J = constraint_jacobian(theta, qs, net, S)
    fd = fd_grad(lambda t: np.array([estimate_quantity(q, net, t, S) for q in qs]), theta)
    assert rel_err(J, fd) <= 1e-6


def test_jacobian_zero_output_weights_quadratic():
    net, theta = small_net(seed=1)
    theta[net.beta_slice] = 0.0
    J = constraint_jacobian(theta, [SQUARE], net, GRID)
    assert np.all(J == 0)


def test_fixed_point_takes_one_iteration():
    net, theta = small_net(seed=2)
    cs = ConstraintSet(net, burgers().quantities, GRID).freeze(theta)
    rep = embed(theta, cs)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_array_equal(rep.theta, theta)


def test_affine_quantity_one_iteration():
    net = linear_net()
    rep = embed(np.array([0.9, -0.3]), [MASS.with_target(0.2)], net, GRID)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(rep.theta, [0.2, -0.3], atol=1e-15)


def _brute_force_nearest(theta_tilde, target):
    # min 1/2 |eta - theta_tilde|^2 s.t. eta1^2 + eta2^2 / 2 = target, via the Lagrange system
    def kkt(z):
        e1, e2, lam = z
        return [e1 - theta_tilde[0] + lam * 2 * e1, e2 - theta_tilde[1] + lam * e2,
                e1**2 + e2**2 / 2 - target]

    sol = scipy.optimize.root(kkt, [*theta_tilde, 0.0], method="hybr", tol=1e-14)
    assert np.max(np.abs(kkt(sol.x))) <= 1e-14
    return sol.x[:2]


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_constraint_vs_brute_force(seed):
    net = linear_net()
    rng = np.random.default_rng(seed)
    theta0 = rng.uniform(0.5, 1.5, 2)
    target = theta0[0] ** 2 + theta0[1] ** 2 / 2
    # the sampled quantity is exactly eta1^2 + eta2^2/2 on the symmetric grid
    assert abs(estimate_quantity(SQUARE, net, theta0, GRID) - target) <= 1e-14
    theta_tilde = theta0 + 1e-5 * rng.standard_normal(2)
    rep = embed(theta_tilde, [SQUARE.with_target(target)], net, GRID)
    assert rep.converged
    assert np.max(np.abs(rep.theta - _brute_force_nearest(theta_tilde, target))) <= 1e-9


def test_quadratic_constraint_vs_line_search_oracle():
    # the simplified Newton point is the root of c along theta_tilde + t c'(theta_tilde)^T
    net, theta0 = small_net(seed=4)
    cs = ConstraintSet(net, [SQUARE], GRID).freeze(theta0)
    rng = np.random.default_rng(0)
    theta_tilde = theta0 + 1e-3 * rng.standard_normal(theta0.size)
    rep = embed(theta_tilde, cs)
    g = cs.jacobian(theta_tilde)[0]
    t = scipy.optimize.brentq(lambda s: cs.residual(theta_tilde + s * g)[0], -1.0, 1.0, xtol=1e-16, rtol=1e-15)
    assert np.max(np.abs(rep.theta - (theta_tilde + t * g))) <= 1e-12


def test_manifold_membership_and_row_space_confinement():
    model = wave()
    net, theta0 = small_net(m=2, seed=6)
    S = SampleSet.equidistant(model.domain, 32)
    qs = [model.quantity("hamiltonian"), Quantity("mass", lambda u, du=None: u[..., 0]),
          Quantity("mom", lambda u, du=None: u[..., 1])]
    cs = ConstraintSet(net, qs, S).freeze(theta0)
    theta_tilde = theta0 + 1e-3 * np.random.default_rng(1).standard_normal(theta0.size)
    rep = embed(theta_tilde, cs, tol=1e-13)
    assert rep.converged and rep.iterations <= 10
    assert np.max(np.abs(cs.residual(rep.theta))) <= 1e-13
    Jc = cs.jacobian(theta_tilde)
    delta = rep.theta - theta_tilde
    coef = np.linalg.lstsq(Jc.T, delta, rcond=None)[0]
    assert np.linalg.norm(Jc.T @ coef - delta) <= 1e-13


def test_correction_shrinks_with_perturbation():
    net, theta0 = small_net(seed=8)
    cs = ConstraintSet(net, [SQUARE, MASS], GRID).freeze(theta0)
    d = np.random.default_rng(3).standard_normal(theta0.size)
    sizes = [np.linalg.norm(embed(theta0 + eps * d, cs).theta - (theta0 + eps * d)) for eps in (1e-2, 5e-3)]
    assert sizes[1] <= 0.5 * sizes[0] * 1.05


def test_singular_jacobian_raises_with_residual():
    net, theta = small_net(seed=1)
    theta[net.beta_slice] = 0.0
    with pytest.raises(NonconvergenceError) as info:
        embed(theta, [SQUARE.with_target(1.0)], net, GRID)
    assert info.value.residual == pytest.approx(1.0)
    np.testing.assert_array_equal(info.value.best, theta)


def test_stall_detected_early():
    net = linear_net()
    # |u|^2 can never reach a negative target; the iteration stalls
    with pytest.raises(NonconvergenceError, match="stalled") as info:
        embed(np.array([1.0, 1.0]), [SQUARE.with_target(-1.0)], net, GRID, kmax=50)
    assert info.value.iterations < 50 and info.value.best is not None


def test_kmax_exceeded_carries_best_iterate():
    net = linear_net()
    with pytest.raises(NonconvergenceError, match="did not reach") as info:
        embed(np.array([1.0, 1.0]), [SQUARE.with_target(2.0)], net, GRID, kmax=2, tol=1e-15)
    best = info.value.best
    assert abs(estimate_quantity(SQUARE, net, best, GRID) - 2.0) < 0.5


def test_no_constraints_is_identity():
    net = linear_net()
    rep = embed(np.array([1.0, 2.0]), [], net, GRID)
    assert rep.converged and rep.iterations == 0
