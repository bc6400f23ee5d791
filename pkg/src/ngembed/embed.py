"""Projection of a parameter vector onto the sampled constrained manifold.

Given a pre-projection vector ``theta_tilde`` and constraints
``c(eta) = q_hat(eta) - target``, the closest point in the Euclidean sense is
found from the Lagrange conditions

    eta = theta_tilde + c'(theta_tilde)^T lam,   c(eta) = 0,

iterating only on the multipliers lam with the Jacobian frozen at
``theta_tilde`` (simplified Newton).  The unknown has one entry per
quantity, so every iteration is a tiny dense solve plus one evaluation of
the sampled quantities.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import NonconvergenceError
from .models import Quantity, QuantityEstimator, SampleSet
from .params import Parametrization


@dataclasses.dataclass
class EmbedReport:
    theta: np.ndarray
    iterations: int
    final_residual: float
    converged: bool
    history: list = dataclasses.field(default_factory=list)


class ConstraintSet:
    """Sampled quantities at fixed points together with their targets."""

    def __init__(self, net: Parametrization, quantities: Sequence[Quantity], points):
        self.net = net
        self.quantities = tuple(quantities)
        self.points = points.points if isinstance(points, SampleSet) else np.asarray(points, dtype=float)
        self.estimators = [QuantityEstimator(net, q, self.points) for q in self.quantities]
        self.targets = np.array([np.nan if q.target is None else q.target for q in self.quantities])

    def __len__(self):
        return len(self.quantities)

    @property
    def names(self):
        return [q.name for q in self.quantities]

    def freeze(self, theta0) -> "ConstraintSet":
        """Set every target to the sampled value at ``theta0``."""
        self.targets = self.values(theta0)
        self.quantities = tuple(q.with_target(t) for q, t in zip(self.quantities, self.targets))
        return self

    def values(self, theta) -> np.ndarray:
        return np.array([e.value(theta) for e in self.estimators])

    def residual(self, theta) -> np.ndarray:
        if np.any(np.isnan(self.targets)):
            raise ValueError("constraint targets are not set; call freeze(theta0) first")
        return self.values(theta) - self.targets

    def jacobian(self, theta) -> np.ndarray:
        if not self.estimators:
            return np.zeros((0, self.net.n_params))
        return np.stack([e.grad(theta) for e in self.estimators])


def _as_constraints(quantities, net, S) -> ConstraintSet:
    if isinstance(quantities, ConstraintSet):
        return quantities
    return ConstraintSet(net, quantities, S)


def constraint_residual(theta, quantities, net=None, S=None) -> np.ndarray:
    """c(theta) = q_hat(theta) - target for every quantity."""
    return _as_constraints(quantities, net, S).residual(np.asarray(theta, dtype=float))


def constraint_jacobian(theta, quantities, net=None, S=None) -> np.ndarray:
    """Rows are the theta-gradients of the sampled quantities, ``(n_cq, p)``."""
    return _as_constraints(quantities, net, S).jacobian(np.asarray(theta, dtype=float))


def embed(theta_tilde, quantities, net=None, S=None, *, tol: float = 1e-12, kmax: int = 50,
          stall_window: int = 5, stall_factor: float = 0.5, cond_max: float = 1e14) -> EmbedReport:
    """Project ``theta_tilde`` onto {eta : c(eta) = 0}.

    ``quantities`` is either a :class:`ConstraintSet` or a sequence of
    quantities with targets (then ``net`` and ``S`` are required).
    Raises :class:`NonconvergenceError` when c' c'^T is numerically
    singular, when the residual stalls, or after ``kmax`` iterations; the
    error carries the best iterate.
    """
    cs = _as_constraints(quantities, net, S)
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    if len(cs) == 0:
        return EmbedReport(theta_tilde.copy(), 0, 0.0, True)
    Jc = cs.jacobian(theta_tilde)
    C = Jc @ Jc.T
    if not np.all(np.isfinite(C)) or np.linalg.cond(C) > cond_max:
        c0 = cs.residual(theta_tilde)
        raise NonconvergenceError(
            f"constraint Jacobian is rank deficient (cond = {np.linalg.cond(C):.3g})",
            best=theta_tilde, residual=float(np.max(np.abs(c0))),
        )
    factor = scipy.linalg.cho_factor(C)
    lam = np.zeros(len(cs))
    c = cs.residual(theta_tilde)
    history = [float(np.max(np.abs(c)))]
    best_res, best = history[0], theta_tilde
    for it in range(1, kmax + 1):
        lam = lam - scipy.linalg.cho_solve(factor, c)
        eta = theta_tilde + Jc.T @ lam
        c = cs.residual(eta)
        res = float(np.max(np.abs(c)))
        history.append(res)
        if not np.isfinite(res):
            break
        if res < best_res:
            best_res, best = res, eta
        if res <= tol:
            return EmbedReport(eta, it, res, True, history)
        if it >= stall_window and res > stall_factor * history[it - stall_window]:
            raise NonconvergenceError(
                f"embedding stalled at residual {best_res:.3g} after {it} iterations",
                best=best, residual=best_res, iterations=it,
            )
    raise NonconvergenceError(
        f"embedding did not reach tol={tol:g} in {kmax} iterations (best residual {best_res:.3g})",
        best=best, residual=best_res, iterations=len(history) - 1,
    )
