"""Explicit time integration of the Neural Galerkin parameter ODE.

Every stage of the integrator solves the sampled least-squares problem at the
stage parameters, with the linearized quantity constraints when
``constrain`` is set.  Embedding, when enabled, is applied once per
completed step to the pre-projection vector.  Quantity targets are frozen at
the sampled values of the initial parameters.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings

import numpy as np
import scipy.linalg
import scipy.optimize

from . import galerkin
from .embed import ConstraintSet, embed as embed_theta
from .errors import ConfigError, FitError, NonconvergenceError, NonFiniteError
from .models import PdeModel, SampleSet
from .params import Parametrization
from .weighted import assemble_weighted, solve_weighted

log = logging.getLogger(__name__)

SCHEMES = ("euler", "rk4")


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk4"
    dt: float = 1e-3
    n_steps: int = 1
    constrain: bool = False
    embed: bool = False
    weighted: bool = False
    reg: float = 1e-8
    weighted_reg: float = 1e-12
    embed_tol: float = 1e-12
    embed_kmax: int = 50
    on_embed_failure: str = "abort"
    store_every: int = 1
    lsq_method: str = "normal"
    chunk: int = galerkin.DEFAULT_CHUNK

    @classmethod
    def from_horizon(cls, T: float, dt: float, **kwargs) -> "IntegratorConfig":
        """Config with ``n_steps = T / dt``; the ratio must be an integer."""
        K = int(round(T / dt))
        if K < 0 or abs(K * dt - T) > 1e-12:
            raise ConfigError(f"T = {T!r} is not an integer multiple of dt = {dt!r}")
        return cls(dt=dt, n_steps=K, **kwargs).validate()

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def variant(self) -> str:
        if self.weighted:
            return "weighted"
        return {(False, False): "plain", (True, False): "constrained",
                (True, True): "embedded", (False, True): "projected"}[(self.constrain, self.embed)]

    def validate(self) -> "IntegratorConfig":
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt!r}")
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be non-negative, got {self.n_steps}")
        if self.reg < 0 or self.weighted_reg < 0:
            raise ConfigError("reg must be non-negative")
        if self.on_embed_failure not in ("abort", "warn"):
            raise ConfigError(f"on_embed_failure must be 'abort' or 'warn', got {self.on_embed_failure!r}")
        if self.store_every < 1:
            raise ConfigError("store_every must be at least 1")
        if self.lsq_method not in ("normal", "qr"):
            raise ConfigError(f"unknown lsq_method {self.lsq_method!r}")
        if self.weighted and (self.constrain or self.embed):
            raise ConfigError("the weighted scheme is run without constraints or embedding")
        return self


@dataclasses.dataclass
class Trajectory:
    """Stored parameter states plus per-step diagnostics.

    ``thetas[i]`` is the state at ``times[i]`` (step ``steps[i]``).  The
    per-step arrays have one entry per step; ``quantity_values`` has one row
    per step including the initial state.
    """

    times: np.ndarray
    steps: np.ndarray
    thetas: np.ndarray
    dt: float
    lsq_residual: np.ndarray
    embed_iters: np.ndarray
    embed_correction: np.ndarray
    stage_constraint: np.ndarray
    quantity_names: list
    quantity_values: np.ndarray
    quantity_targets: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.lsq_residual)

    def theta_at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no stored state at t = {t}")
        return self.thetas[i]

    def quantity_drift(self) -> np.ndarray:
        """max_k |q_hat(theta_k) - q_hat(theta_0)| per quantity."""
        if self.quantity_values.size == 0:
            return np.zeros(0)
        return np.max(np.abs(self.quantity_values - self.quantity_values[0]), axis=0)


class NeuralGalerkin:
    """Sampled Neural Galerkin integrator for one net, model and sample layout."""

    def __init__(self, net: Parametrization, model: PdeModel, cfg: IntegratorConfig,
                 galerkin_samples: SampleSet, quantity_samples: SampleSet | None = None):
        self.net, self.model, self.cfg = net, model, cfg.validate()
        self.samples = galerkin_samples
        if (cfg.constrain or cfg.embed) and not model.quantities:
            raise ConfigError(f"{cfg.variant} run needs at least one quantity on model {model.name!r}")
        if cfg.weighted:
            # raises ConstructionError early for unsupported models or nets
            assemble_weighted(net, net.init(0) if hasattr(net, "init") else np.zeros(net.n_params),
                              model, galerkin_samples.points[:4])
        qs = quantity_samples if quantity_samples is not None else galerkin_samples
        self.constraints = ConstraintSet(net, model.quantities, qs)

    # -- one slope evaluation ---------------------------------------------

    def slope(self, theta):
        """theta_dot at ``theta`` and a small diagnostics dict."""
        cfg = self.cfg
        theta = np.asarray(theta, dtype=float)
        if cfg.weighted:
            system = assemble_weighted(self.net, theta, self.model, self.samples)
            s, res = solve_weighted(system, theta, cfg.weighted_reg)
            rhs_norm = float(np.linalg.norm(system.J @ (system.selector * theta)))
            return s, {"residual": res / max(rhs_norm, 1e-300), "constraint": 0.0}
        g = self.constraints.jacobian(theta).T if cfg.constrain else None
        if cfg.lsq_method == "qr":
            A, b = galerkin.assemble_lsq(self.net, theta, self.model, self.samples)
            s = galerkin.solve_constrained_lsq(A, b, g, cfg.reg, method="qr")
            res, bnorm = float(np.linalg.norm(A @ s - b)), float(np.linalg.norm(b))
        else:
            G, h, bb = galerkin.assemble_normal(self.net, theta, self.model, self.samples, cfg.chunk)
            s = galerkin.solve_constrained_normal(G, h, g, cfg.reg)
            res, bnorm = galerkin.residual_norm(G, h, bb, s), math.sqrt(bb)
        cons = 0.0
        if g is not None:
            scale = np.linalg.norm(g, axis=0) * max(np.linalg.norm(s), 1e-300)
            cons = float(np.max(np.abs(g.T @ s) / np.maximum(scale, 1e-300)))
        if not np.all(np.isfinite(s)):
            raise NonFiniteError("non-finite parameter velocity")
        return s, {"residual": res / max(bnorm, 1e-300), "constraint": cons}

    def step(self, theta):
        """One explicit step without embedding; returns ``(theta_tilde, info)``."""
        dt = self.cfg.dt
        theta = np.asarray(theta, dtype=float)
        k1, i1 = self.slope(theta)
        if self.cfg.scheme == "euler":
            return theta + dt * k1, i1
        k2, i2 = self.slope(theta + 0.5 * dt * k1)
        k3, i3 = self.slope(theta + 0.5 * dt * k2)
        k4, i4 = self.slope(theta + dt * k3)
        info = {"residual": i1["residual"],
                "constraint": max(i["constraint"] for i in (i1, i2, i3, i4))}
        return theta + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), info

    def project(self, theta_tilde, step_index: int = -1):
        """Embed ``theta_tilde``; returns ``(theta, iterations)``."""
        cfg = self.cfg
        try:
            rep = embed_theta(theta_tilde, self.constraints, tol=cfg.embed_tol, kmax=cfg.embed_kmax)
            return rep.theta, rep.iterations
        except NonconvergenceError as err:
            if cfg.on_embed_failure == "abort":
                raise NonconvergenceError(
                    f"step {step_index}: {err}", best=err.best, residual=err.residual,
                    iterations=err.iterations,
                ) from err
            warnings.warn(f"step {step_index}: {err}; continuing with best iterate", RuntimeWarning,
                          stacklevel=2)
            return np.asarray(err.best), err.iterations

    def run(self, theta0, callback=None) -> Trajectory:
        cfg = self.cfg
        theta = np.asarray(theta0, dtype=float).copy()
        has_q = len(self.constraints) > 0
        if has_q:
            self.constraints.freeze(theta)
        K = cfg.n_steps
        nq = len(self.constraints)
        qvals = np.zeros((K + 1, nq))
        if has_q:
            qvals[0] = self.constraints.values(theta)
        res = np.zeros(K)
        iters = np.zeros(K, dtype=int)
        corr = np.zeros(K)
        cons = np.zeros(K)
        times, steps, thetas = [0.0], [0], [theta.copy()]
        for k in range(K):
            theta_tilde, info = self.step(theta)
            res[k], cons[k] = info["residual"], info["constraint"]
            if cfg.embed:
                theta, iters[k] = self.project(theta_tilde, k + 1)
                corr[k] = float(np.linalg.norm(theta - theta_tilde))
            else:
                theta = theta_tilde
            if not np.all(np.isfinite(theta)):
                raise NonFiniteError(f"non-finite parameters after step {k + 1}")
            if has_q:
                qvals[k + 1] = self.constraints.values(theta)
            if (k + 1) % cfg.store_every == 0 or k + 1 == K:
                times.append((k + 1) * cfg.dt)
                steps.append(k + 1)
                thetas.append(theta.copy())
            if callback is not None:
                callback(k + 1, theta, info)
        return Trajectory(
            times=np.array(times), steps=np.array(steps), thetas=np.array(thetas), dt=cfg.dt,
            lsq_residual=res, embed_iters=iters, embed_correction=corr, stage_constraint=cons,
            quantity_names=self.constraints.names, quantity_values=qvals,
            quantity_targets=np.array(self.constraints.targets) if has_q else np.zeros(0),
        )


def step(net: Parametrization, model: PdeModel, theta, cfg: IntegratorConfig,
         galerkin_samples: SampleSet, quantity_samples: SampleSet | None = None):
    """One step from ``theta``, embedded when ``cfg.embed``; targets taken at ``theta``."""
    ng = NeuralGalerkin(net, model, cfg, galerkin_samples, quantity_samples)
    if len(ng.constraints):
        ng.constraints.freeze(theta)
    theta_tilde, _ = ng.step(theta)
    return ng.project(theta_tilde, 1)[0] if cfg.embed else theta_tilde


def run(net: Parametrization, model: PdeModel, theta0, cfg: IntegratorConfig,
        galerkin_samples: SampleSet, quantity_samples: SampleSet | None = None,
        callback=None) -> Trajectory:
    return NeuralGalerkin(net, model, cfg, galerkin_samples, quantity_samples).run(theta0, callback)


# -- initial condition fit ----------------------------------------------------

def levenberg_marquardt(resid, jac, theta, max_iter: int = 5000, target: float = 0.0,
                        tau: float = 1e-3, step_tol: float = 1e-15, n_data: int | None = None):
    """Damped Gauss-Newton on the normal equations with Marquardt scaling.

    The damping follows Nielsen's gain-ratio update.  Stops when the RMSE of
    the first ``n_data`` residual entries (default: all) drops to
    ``target``, the step stalls, or after ``max_iter`` iterations.  Returns
    ``(theta, rmse, iterations)``.
    """
    theta = np.asarray(theta, dtype=float).copy()
    r = resid(theta)
    cost = 0.5 * float(r @ r)
    n_data = r.size if n_data is None else n_data

    def rmse(r):
        return math.sqrt(float(r[:n_data] @ r[:n_data]) / n_data)

    J = jac(theta)
    A, g = J.T @ J, J.T @ r
    mu, nu = tau * float(np.max(np.diag(A))), 2.0
    it = 0
    for it in range(1, max_iter + 1):
        if rmse(r) <= target:
            break
        scale = np.maximum(np.diag(A), 1e-12 * float(np.max(np.diag(A))))
        K = A + mu * np.diag(scale)
        try:
            step = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), g)
        except np.linalg.LinAlgError:
            mu, nu = mu * nu, 2.0 * nu
            continue
        if np.linalg.norm(step) <= step_tol * (np.linalg.norm(theta) + step_tol):
            break
        r_new = resid(theta + step)
        cost_new = 0.5 * float(r_new @ r_new)
        predicted = 0.5 * float(step @ (mu * scale * step - g))
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if rho > 0 and math.isfinite(cost_new):
            theta, r, cost = theta + step, r_new, cost_new
            J = jac(theta)
            A, g = J.T @ J, J.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
        else:
            mu, nu = mu * nu, 2.0 * nu
    return theta, rmse(r), it


def fit_initial(net: Parametrization, u0, samples: SampleSet, seed: int = 0,
                rmse_tol: float = 1e-5, max_iter: int = 2000, margin: float = 0.1,
                polish_nfev: int = 3000, ridge: float = 1e-9,
                theta_init=None) -> tuple[np.ndarray, float]:
    """Least-squares fit of the net to ``u0`` at the samples.

    Returns ``(theta0, rmse)``.  Linear parametrizations are solved in one
    least-squares step.  Otherwise Levenberg-Marquardt runs from
    ``net.init(seed)`` until the RMSE drops below ``margin * rmse_tol``; if
    it stalls first, scipy's QR-based Levenberg-Marquardt takes over.
    A ridge term ``ridge * ||theta||^2`` keeps the weights moderate, which
    keeps the fitted function free of spurious high-frequency content.
    Raises :class:`FitError` when the RMSE stays above ``rmse_tol``.
    """
    X = samples.points
    target = np.asarray(u0(X) if callable(u0) else u0, dtype=float).reshape(len(X), -1)
    p = net.n_params
    y = target.reshape(-1)

    def resid(theta):
        return net.forward(theta, X, 0)[0].reshape(-1) - y

    def jac(theta):
        return net.param_jacobian(theta, X).reshape(-1, p)

    sq = math.sqrt(ridge)

    def resid_aug(theta):
        return np.concatenate([resid(theta), sq * theta])

    def jac_aug(theta):
        return np.vstack([jac(theta), sq * np.eye(p)])

    if net.n_alpha == 0:
        theta = np.linalg.lstsq(jac(np.zeros(p)), y, rcond=None)[0]
    else:
        if theta_init is None:
            theta_init = net.init(seed) if hasattr(net, "init") else np.random.default_rng(seed).normal(size=p)
        goal = margin * rmse_tol
        theta, rmse, its = levenberg_marquardt(resid_aug, jac_aug, theta_init, max_iter, goal, n_data=y.size)
        log.debug("fit: rmse %.3e after %d iterations", rmse, its)
        if rmse > goal:
            # normal equations square the conditioning; finish with a QR-based solver
            spent = 0
            while rmse > goal and spent < polish_nfev:
                sol = scipy.optimize.least_squares(resid_aug, theta, jac=jac_aug, method="lm", xtol=1e-15,
                                                   ftol=1e-15, gtol=1e-15, max_nfev=200)
                theta, spent = sol.x, spent + sol.nfev
                rmse = math.sqrt(np.mean(sol.fun[:y.size] ** 2))
                if sol.status != 0:
                    break
            log.debug("fit polish: rmse %.3e after %d evaluations", rmse, spent)
    rmse = math.sqrt(np.mean(resid(theta) ** 2))
    if not math.isfinite(rmse) or rmse > rmse_tol:
        raise FitError(f"initial fit reached RMSE {rmse:.3e} > {rmse_tol:.1e}", rmse=rmse, theta=theta)
    return theta, rmse
