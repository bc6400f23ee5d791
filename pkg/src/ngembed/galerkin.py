"""Sampled Neural Galerkin systems and the per-step constrained least squares.

The regression at a parameter vector theta reads

    min_dtheta ||A dtheta - b||^2 + mu ||dtheta||^2   s.t.  g^T dtheta = 0,

where the rows of A are the per-sample, per-component gradients of u with
respect to theta and b stacks the PDE right-hand side at the samples.  The
constraints are eliminated with an orthonormal null-space basis Z of g^T from
a pivoted QR factorization, leaving an unconstrained problem in Z^T dtheta.
``reg`` is always relative: mu = reg * mean(diag(A^T A)).
"""
from __future__ import annotations

import dataclasses
import warnings

import numpy as np
import scipy.linalg
from scipy.linalg.blas import dsyrk

from .errors import NonFiniteError, RankDeficiencyWarning, SolverError
from .models import PdeModel, SampleSet
from .params import Jet, Parametrization

DEFAULT_CHUNK = 4096


@dataclasses.dataclass
class SampledSystem:
    A: np.ndarray
    b: np.ndarray
    g: np.ndarray


def _points(S):
    return S.points if isinstance(S, SampleSet) else np.asarray(S, dtype=float)


def _rhs_rows(net, theta, model, X):
    u, du, d2u = net.forward(theta, X, model.rhs_order)
    f = np.asarray(model.rhs(Jet(u, du, d2u), X))
    return f


def _raise_nonfinite(X, rows, what):
    bad = np.flatnonzero(~np.all(np.isfinite(rows.reshape(len(X), -1)), axis=1))[0]
    raise NonFiniteError(f"non-finite {what} at sample {bad}, x = {X[bad].tolist()}")


def assemble_lsq(net: Parametrization, theta, model: PdeModel, S) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares matrix ``(n*m, p)`` and right-hand side ``(n*m,)``.

    Row ``s*m + k`` belongs to sample s and output component k.
    """
    X = _points(S)
    theta = np.asarray(theta, dtype=float)
    J = net.param_jacobian(theta, X)
    f = _rhs_rows(net, theta, model, X)
    if not np.all(np.isfinite(J)):
        _raise_nonfinite(X, J, "parameter gradient")
    if not np.all(np.isfinite(f)):
        _raise_nonfinite(X, f, "right-hand side")
    return J.reshape(-1, net.n_params), f.reshape(-1)


def assemble_normal(net: Parametrization, theta, model: PdeModel, S, chunk: int = DEFAULT_CHUNK):
    """Chunked ``(A^T A, A^T b, b^T b)`` without holding all of A in memory."""
    X = _points(S)
    p = net.n_params
    G = np.zeros((p, p), order="F")
    h = np.zeros(p)
    bb = 0.0
    for start in range(0, len(X), chunk):
        A, b = assemble_lsq(net, theta, model, X[start:start + chunk])
        G = dsyrk(1.0, A, beta=1.0, c=G, trans=1, lower=0, overwrite_c=1)
        h += A.T @ b
        bb += float(b @ b)
    G = np.triu(G) + np.triu(G, 1).T
    return G, h, bb


def assemble_mf(net: Parametrization, theta, model: PdeModel, S) -> tuple[np.ndarray, np.ndarray]:
    """Sampled Gram matrix M and projected right-hand side F.

    Parameter gradients come from JAX autodiff, independently of the
    hand-written Jacobian used by :func:`assemble_lsq`.
    """
    X = _points(S)
    theta = np.asarray(theta, dtype=float)
    G = Parametrization.param_jacobian(net, theta, X)
    f = _rhs_rows(net, theta, model, X)
    n = len(X)
    M = np.einsum("skp,skq->pq", G, G) / n
    F = np.einsum("skp,sk->p", G, f) / n
    return M, F


def null_space_basis(g, rank_tol: float = 1e-10):
    """Orthonormal basis of null(g^T) and the numerical rank of g.

    Dependent columns of g are dropped with a :class:`RankDeficiencyWarning`.
    Returns ``(None, 0)`` when there are no constraints.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    p, k = g.shape
    if k == 0:
        return None, 0
    if k > p:
        raise SolverError(f"{k} constraints for {p} unknowns")
    Q, R, _ = scipy.linalg.qr(g, mode="full", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = 0 if diag[0] == 0 else int(np.sum(diag > rank_tol * diag[0]))
    if rank < k:
        warnings.warn(
            f"constraint gradients have rank {rank} < {k}; dropping dependent columns",
            RankDeficiencyWarning, stacklevel=3,
        )
    if rank == 0:
        return None, 0
    return Q[:, rank:], rank


def solve_constrained_normal(G, h, g=None, reg: float = 0.0, rank_tol: float = 1e-10):
    """Solve the constrained, regularized problem from its normal equations."""
    G = np.asarray(G, dtype=float)
    p = G.shape[0]
    mu = reg * float(np.mean(np.diag(G)))
    Z, _ = null_space_basis(np.zeros((p, 0)) if g is None else g, rank_tol)
    if Z is None:
        K, r = G.copy(), np.asarray(h, dtype=float).copy()
    else:
        K, r = Z.T @ G @ Z, Z.T @ h
    K[np.diag_indices_from(K)] += mu
    if mu == 0.0 and np.linalg.matrix_rank(K) < K.shape[0]:
        raise SolverError("least-squares matrix is singular on the constraint null space")
    try:
        y = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), r)
    except np.linalg.LinAlgError:
        y = scipy.linalg.lstsq(K, r)[0]
    return y if Z is None else Z @ y


def solve_constrained_lsq(A, b, g=None, reg: float = 0.0, method: str = "qr", rank_tol: float = 1e-10):
    """min ||A x - b||^2 + mu ||x||^2 subject to g^T x = 0.

    ``method="qr"`` works on A directly; ``"normal"`` forms A^T A first.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    p = A.shape[1]
    if method == "normal":
        return solve_constrained_normal(A.T @ A, A.T @ b, g, reg, rank_tol)
    if method != "qr":
        raise ValueError(f"unknown method {method!r}")
    mu = reg * float(np.mean(np.sum(A * A, axis=0)))
    Z, _ = null_space_basis(np.zeros((p, 0)) if g is None else g, rank_tol)
    AZ = A if Z is None else A @ Z
    q = AZ.shape[1]
    if mu > 0.0:
        AZ = np.vstack([AZ, np.sqrt(mu) * np.eye(q)])
        b = np.concatenate([b, np.zeros(q)])
    y, _, rank, _ = scipy.linalg.lstsq(AZ, b, lapack_driver="gelsd")
    if rank < q:
        raise SolverError(
            f"least-squares matrix has rank {rank} < {q} on the constraint null space"
        )
    return y if Z is None else Z @ y


def residual_norm(G, h, bb, x) -> float:
    """||A x - b|| recovered from the normal-equation pieces."""
    return float(np.sqrt(max(bb - 2.0 * x @ h + x @ G @ x, 0.0)))
