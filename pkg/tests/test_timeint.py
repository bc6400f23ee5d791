import dataclasses

import jax.numpy as jnp
import numpy as np
import pytest

from conftest import small_net
from ngembed.errors import ConfigError, FitError, NonconvergenceError
from ngembed.galerkin import assemble_mf
from ngembed.models import SampleSet, burgers, estimate_quantity, wave
from ngembed.params import FunctionBasis, SineBasis
from ngembed.timeint import IntegratorConfig, NeuralGalerkin, fit_initial, run, step

CONST = FunctionBasis([lambda x: 1.0 + 0.0 * x])
GROWTH = dataclasses.replace(burgers(), name="growth", rhs=lambda jet, x=None: jet.value, quantities=())
ONE_POINT = SampleSet(np.array([[0.3]]))


def surrogate(theta0, dt, K, scheme):
    cfg = IntegratorConfig(scheme=scheme, dt=dt, n_steps=K, reg=0.0)
    return run(CONST, GROWTH, np.array([theta0]), cfg, ONE_POINT)


def test_rk4_and_euler_one_step_on_linear_ode():
    dt = 0.1
    rk = step(CONST, GROWTH, np.array([2.0]), IntegratorConfig(scheme="rk4", dt=dt, reg=0.0), ONE_POINT)
    np.testing.assert_allclose(rk, [2.0 * (1 + dt + dt**2 / 2 + dt**3 / 6 + dt**4 / 24)], rtol=1e-15)
    eu = step(CONST, GROWTH, np.array([2.0]), IntegratorConfig(scheme="euler", dt=dt, reg=0.0), ONE_POINT)
    np.testing.assert_allclose(eu, [2.0 * (1 + dt)], rtol=1e-15)


def test_rk4_observed_order():
    errs = []
    for n in (8, 16, 32):
        traj = surrogate(1.0, 1.0 / n, n, "rk4")
        errs.append(abs(traj.thetas[-1, 0] - np.e))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.8)


def test_euler_first_order():
    errs = [abs(surrogate(1.0, 1.0 / n, n, "euler").thetas[-1, 0] - np.e) for n in (64, 128)]
    assert np.log2(errs[0] / errs[1]) == pytest.approx(1.0, abs=0.05)


def test_zero_steps_returns_initial_state():
    cfg = IntegratorConfig.from_horizon(0.0, 0.1, reg=0.0)
    traj = run(CONST, GROWTH, np.array([1.5]), cfg, ONE_POINT)
    assert traj.n_steps == 0 and traj.thetas.shape == (1, 1) and traj.times.tolist() == [0.0]


def test_config_validation():
    with pytest.raises(ConfigError):
        IntegratorConfig.from_horizon(1.0, 0.3)
    cfg = IntegratorConfig.from_horizon(0.4, 0.1)
    assert cfg.n_steps == 4 and abs(cfg.T - 0.4) <= 1e-12
    for bad in [dict(scheme="rk3"), dict(dt=-1.0), dict(dt=float("nan")), dict(reg=-1.0),
                dict(on_embed_failure="ignore"), dict(store_every=0), dict(lsq_method="svd"),
                dict(weighted=True, embed=True), dict(n_steps=-1)]:
        with pytest.raises(ConfigError):
            IntegratorConfig(**bad).validate()
    assert IntegratorConfig(constrain=True, embed=True).variant == "embedded"
    assert IntegratorConfig(embed=True).variant == "projected"
    assert IntegratorConfig().variant == "plain"


def test_constrained_variant_needs_quantities():
    with pytest.raises(ConfigError):
        NeuralGalerkin(CONST, GROWTH, IntegratorConfig(constrain=True), ONE_POINT)


def test_plain_run_matches_direct_gram_integration():
    model = burgers()
    # a well conditioned nonlinear two-parameter net keeps the two solve routes comparable
    net = SineBasis(1)
    theta0 = np.array([2.0, 0.5])
    S = SampleSet.equidistant(model.domain, 64)
    dt, K = 1e-2, 10
    traj = run(net, model, theta0, IntegratorConfig(scheme="rk4", dt=dt, n_steps=K, reg=0.0), S)

    def f(theta):
        M, F = assemble_mf(net, theta, model, S)
        return np.linalg.solve(M, F)

    theta = theta0.copy()
    for _ in range(K):
        k1 = f(theta)
        k2 = f(theta + dt / 2 * k1)
        k3 = f(theta + dt / 2 * k2)
        k4 = f(theta + dt * k3)
        theta = theta + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert np.max(np.abs(traj.thetas[-1] - theta)) <= 1e-8


@pytest.fixture(scope="module")
def burgers_runs():
    model = burgers()
    net, theta0 = small_net(seed=3, widths=(6, 6), periodic_width=5)
    S = SampleSet.equidistant(model.domain, 60)
    out = {}
    for scheme in ("euler", "rk4"):
        for name, kw in [("plain", {}), ("constrained", dict(constrain=True)),
                         ("embedded", dict(constrain=True, embed=True))]:
            cfg = IntegratorConfig(scheme=scheme, dt=5e-3, n_steps=20, reg=1e-8, **kw)
            out[scheme, name] = run(net, model, theta0, cfg, S)
    return net, theta0, S, out


def test_embedded_conserves_mass_on_quantity_points(burgers_runs):
    net, theta0, S, out = burgers_runs
    for scheme in ("euler", "rk4"):
        traj = out[scheme, "embedded"]
        assert traj.quantity_drift()[0] <= 1e-11
        mass = [estimate_quantity(burgers().quantity("mass"), net, th, S) for th in traj.thetas]
        assert np.max(np.abs(np.array(mass) - mass[0])) <= 1e-11
        assert np.median(traj.embed_iters) <= 5


def test_constraint_alone_drifts_more_than_embedding(burgers_runs):
    _, _, _, out = burgers_runs
    c, e = out["rk4", "constrained"].quantity_drift()[0], out["rk4", "embedded"].quantity_drift()[0]
    assert c > e and c > 1e3 * max(e, 1e-16)


def test_per_stage_constraint_satisfied(burgers_runs):
    _, _, _, out = burgers_runs
    for scheme in ("euler", "rk4"):
        assert np.max(out[scheme, "constrained"].stage_constraint) <= 1e-11
        assert np.max(out[scheme, "embedded"].stage_constraint) <= 1e-11


def test_trajectory_invariants_and_store_every():
    model = burgers()
    net, theta0 = small_net(seed=1)
    S = SampleSet.equidistant(model.domain, 30)
    traj = run(net, model, theta0, IntegratorConfig(dt=1e-2, n_steps=7, store_every=3, reg=1e-8), S)
    assert traj.steps.tolist() == [0, 3, 6, 7]
    assert np.all(np.diff(traj.times) > 0) and traj.thetas.shape == (4, net.n_params)
    np.testing.assert_allclose(traj.theta_at(0.06), traj.thetas[2])
    with pytest.raises(KeyError):
        traj.theta_at(0.05)
    assert traj.quantity_values.shape == (8, 1) and traj.lsq_residual.shape == (7,)


def test_embed_failure_abort_and_warn():
    model = burgers()
    net, theta0 = small_net(seed=1)
    S = SampleSet.equidistant(model.domain, 30)
    base = dict(dt=1e-2, n_steps=2, reg=1e-8, constrain=False, embed=True, embed_tol=1e-300, embed_kmax=1)
    # the plain step changes the mass, so one simplified-Newton iteration cannot reach tol=1e-300
    model2 = burgers(quantities=("hamiltonian",))
    with pytest.raises(NonconvergenceError, match="step 1"):
        run(net, model2, theta0, IntegratorConfig(**base), S)
    with pytest.warns(RuntimeWarning):
        traj = run(net, model2, theta0, IntegratorConfig(**base, on_embed_failure="warn"), S)
    assert traj.n_steps == 2 and np.all(np.isfinite(traj.thetas))


def test_callback_sees_every_step():
    seen = []
    cfg = IntegratorConfig(dt=0.1, n_steps=3, reg=0.0)
    NeuralGalerkin(CONST, GROWTH, cfg, ONE_POINT).run(np.array([1.0]), lambda k, th, info: seen.append(k))
    assert seen == [1, 2, 3]


def test_weighted_run_conserves_hamiltonian_in_time():
    model = wave()
    net, theta0 = small_net(m=2, seed=2, widths=(5, 4), periodic_width=3)
    S = SampleSet.equidistant(model.domain, 64)
    cfg = IntegratorConfig(dt=1e-3, n_steps=10, weighted=True)
    traj = run(net, model, theta0, cfg, S)
    # RK4 on the continuous conservation law keeps the drift at the local error level
    assert traj.quantity_drift()[0] <= 1e-8
    assert np.max(traj.lsq_residual) <= 1e-6


def test_fit_exactly_representable():
    net, theta_star = small_net(seed=5, widths=(4,), periodic_width=3)
    S = SampleSet.equidistant(((-1.0, 1.0),), 80)
    u0 = lambda X: net(theta_star, X)
    theta, rmse = fit_initial(net, u0, S, seed=5, rmse_tol=1e-10, ridge=0.0, margin=1e-3)
    assert rmse <= 1e-10


def test_fit_linear_matches_lstsq_and_is_deterministic():
    net = FunctionBasis([lambda x: 1.0 + 0.0 * x, lambda x: jnp.sin(jnp.pi * x), lambda x: jnp.cos(jnp.pi * x)])
    S = SampleSet.equidistant(((-1.0, 1.0),), 50)
    u0 = lambda X: np.exp(np.sin(np.pi * X[:, :1]))
    theta, rmse = fit_initial(net, u0, S, rmse_tol=1.0)
    A = net.features(np.zeros(3), S.points)[0]
    np.testing.assert_allclose(theta, np.linalg.lstsq(A, u0(S.points)[:, 0], rcond=None)[0], atol=1e-10)
    model = burgers()
    net2, _ = small_net(seed=0, widths=(6,), periodic_width=4)
    S2 = SampleSet.equidistant(model.domain, 100)
    a = fit_initial(net2, model.initial_condition, S2, seed=0, rmse_tol=1.0, max_iter=50, polish_nfev=0)[0]
    b = fit_initial(net2, model.initial_condition, S2, seed=0, rmse_tol=1.0, max_iter=50, polish_nfev=0)[0]
    assert a.tobytes() == b.tobytes()


def test_fit_error_reports_rmse():
    net = FunctionBasis([lambda x: 1.0 + 0.0 * x])
    S = SampleSet.equidistant(((-1.0, 1.0),), 20)
    with pytest.raises(FitError) as info:
        fit_initial(net, lambda X: np.sin(np.pi * X), S, rmse_tol=1e-5)
    assert info.value.rmse == pytest.approx(np.sqrt(0.5), rel=1e-10)
