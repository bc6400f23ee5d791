"""Weighted Neural Galerkin systems for separable parametrizations.

For u(theta, x) = V(x, alpha) beta and a factorizable Hamiltonian with
weight Q, the sampled system is

    M_Q(theta) theta_dot = J_Q(theta) D theta,   D = blockdiag(0, I_beta),

with M_Q the Q-weighted Gram matrix of the parameter gradients and J_Q
skew-symmetric by construction.  The beta-beta block of J_Q is assembled as
the half difference of the two sampled sums, which keeps it exactly skew
whatever the sample points are.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

from .errors import ConstructionError
from .models import PdeModel, Quantity, SampleSet, quantity_param_grad
from .params import Parametrization, separable_views


@dataclasses.dataclass
class WeightedSystem:
    M: np.ndarray
    J: np.ndarray
    n_alpha: int
    n_beta: int

    @property
    def selector(self) -> np.ndarray:
        """Diagonal of D as a 0/1 vector."""
        return np.concatenate([np.zeros(self.n_alpha), np.ones(self.n_beta)])

    def blocks(self):
        a = slice(0, self.n_alpha)
        b = slice(self.n_alpha, self.n_alpha + self.n_beta)
        return {
            "M11": self.M[a, a], "M12": self.M[a, b], "M22": self.M[b, b],
            "J12": self.J[a, b], "J22": self.J[b, b],
        }


def _points(S):
    return S.points if isinstance(S, SampleSet) else np.asarray(S, dtype=float)


def _require_structure(net, model):
    if model.hamiltonian is None:
        raise ConstructionError(
            f"model {model.name!r} has no factorizable Hamiltonian; the weighted scheme needs J and Q"
        )
    if not net.separable:
        raise ConstructionError("weighted scheme needs a separable parametrization (no output bias)")


def _weighted_pieces(net, theta, model, X):
    """Per-sample gradient G, weight Q, Q V and T = J(u)[Q V e_l]."""
    H = model.hamiltonian
    views = separable_views(net, theta)
    G = net.param_jacobian(theta, X)                      # (n, m, p)
    V = G[:, :, net.beta_slice]                          # du/dbeta = V
    dV = views.dV(X)                                     # (n, m, d, nb)
    u, du, _ = net.forward(theta, X, 1)
    Q = np.asarray(H.q_eval(u))                          # (n, m, m)
    QV = np.einsum("nij,njl->nil", Q, V)
    dQV = np.einsum("nij,njdl->nidl", Q, dV)
    if H.q_dx is not None:
        dQV = dQV + np.einsum("nijd,njl->nidl", np.asarray(H.q_dx(u, du)), V)
    # move the basis index next to the sample index so j_apply broadcasts over it
    q = np.moveaxis(QV, 2, 1)                            # (n, nb, m)
    dq = np.moveaxis(dQV, 3, 1)                          # (n, nb, m, d)
    T = np.asarray(H.j_apply(u[:, None, :], du[:, None, :, :], q, dq))  # (n, nb, m)
    return G, Q, QV, T, u, du


def assemble_weighted(net: Parametrization, theta, model: PdeModel, S) -> WeightedSystem:
    """Sampled weighted system with exactly skew-symmetric J_Q."""
    _require_structure(net, model)
    X = _points(S)
    theta = np.asarray(theta, dtype=float)
    n = len(X)
    G, Q, QV, T, _, _ = _weighted_pieces(net, theta, model, X)
    QG = np.einsum("nij,njp->nip", Q, G)
    M = np.einsum("njp,njq->pq", QG, G) / n
    M = 0.5 * (M + M.T)
    a, b = net.alpha_slice, net.beta_slice
    J12 = np.einsum("nji,nlj->il", QG[:, :, a], T) / n
    K = np.einsum("njk,nlj->kl", QV, T) / n
    J22 = 0.5 * K - 0.5 * K.T
    J = np.zeros_like(M)
    J[a, b] = J12
    J[b, a] = -J12.T
    J[b, b] = J22
    return WeightedSystem(M, J, net.n_alpha, net.n_beta)


def weighted_rhs(system: WeightedSystem, theta) -> np.ndarray:
    """J_Q D theta."""
    return system.J @ (system.selector * np.asarray(theta, dtype=float))


def unfactored_rhs(net: Parametrization, theta, model: PdeModel, S) -> np.ndarray:
    """Direct sample mean of the weighted projection of J(u) Q(u) u.

    Agrees with :func:`weighted_rhs` in the alpha block always, and in the
    beta block when the sampled beta-beta sum is already skew.
    """
    _require_structure(net, model)
    X = _points(S)
    theta = np.asarray(theta, dtype=float)
    G, Q, QV, T, u, du = _weighted_pieces(net, theta, model, X)
    H = model.hamiltonian
    beta = theta[net.beta_slice]
    Qu = np.einsum("nij,nj->ni", Q, u)
    dQu = np.einsum("nij,njd->nid", Q, du)
    if H.q_dx is not None:
        dQu = dQu + np.einsum("nijd,nj->nid", np.asarray(H.q_dx(u, du)), u)
    JQu = np.asarray(H.j_apply(u, du, Qu, dQu))           # (n, m)
    QG = np.einsum("nij,njp->nip", Q, G)
    F = np.einsum("njp,nj->p", QG, JQu) / len(X)
    assert np.allclose(JQu, np.einsum("nlj,l->nj", T, beta), atol=1e-10 * (1 + np.abs(JQu).max()))
    return F


def solve_weighted(system: WeightedSystem, theta, reg: float = 1e-12):
    """Regularized solve of M_Q theta_dot = J_Q D theta.

    Returns ``(theta_dot, residual)`` with residual ``||M_Q theta_dot - J_Q D theta||``.
    """
    rhs = weighted_rhs(system, theta)
    M = system.M
    mu = reg * float(np.mean(np.diag(M)))
    K = M.copy()
    K[np.diag_indices_from(K)] += mu
    try:
        x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), rhs)
    except np.linalg.LinAlgError:
        x = scipy.linalg.lstsq(K, rhs)[0]
    return x, float(np.linalg.norm(M @ x - rhs))


def sampled_hamiltonian_gradient_check(net: Parametrization, theta, model: PdeModel, S,
                                       quantity_samples=None) -> float:
    """Relative residual of grad H(theta) = M_Q(theta)^T D theta.

    The identity needs the Hamiltonian estimated on the Galerkin samples, so
    a different ``quantity_samples`` set is rejected.
    """
    X = _points(S)
    if quantity_samples is not None:
        Y = _points(quantity_samples)
        if Y.shape != X.shape or not np.array_equal(Y, X):
            raise ValueError("Hamiltonian and Galerkin sample sets differ; the identity needs them equal")
    _require_structure(net, model)
    H = model.hamiltonian
    quantity = Quantity("hamiltonian", lambda u, du=None: H.density(u), 0)
    grad = quantity_param_grad(quantity, net, theta, SampleSet(X))
    system = assemble_weighted(net, theta, model, X)
    other = system.M.T @ (system.selector * np.asarray(theta, dtype=float))
    return float(np.linalg.norm(grad - other) / max(1.0, np.linalg.norm(grad)))
