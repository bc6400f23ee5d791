"""Error metrics on test points."""
from __future__ import annotations

import numpy as np

from ..models import Quantity, QuantityEstimator
from ..params import Parametrization
from ..reference import SpectralSolution, sample_reference


def relative_error(u_hat, u_ref) -> float:
    """sum_i ||u_hat(x_i) - u_ref(x_i)|| / sum_i ||u_ref(x_i)|| with pointwise Euclidean norms."""
    u_hat = np.asarray(u_hat, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u_hat.ndim == 1:
        u_hat, u_ref = u_hat[:, None], u_ref[:, None]
    if u_hat.shape != u_ref.shape:
        raise ValueError(f"shape mismatch {u_hat.shape} vs {u_ref.shape}")
    den = float(np.sum(np.linalg.norm(u_ref, axis=1)))
    if den == 0.0:
        raise ValueError("reference field vanishes at every test point")
    return float(np.sum(np.linalg.norm(u_hat - u_ref, axis=1)) / den)


def relative_error_series(net: Parametrization, times, thetas, reference: SpectralSolution, X) -> np.ndarray:
    """E_r at every stored time; the reference must hold a frame for each."""
    return np.array([
        relative_error(net.forward(th, X, 0)[0], sample_reference(reference, float(t), X))
        for t, th in zip(times, thetas)
    ])


def conservation_error(values) -> np.ndarray:
    """|q(t_k) - q(t_0)| for a series of quantity values."""
    values = np.asarray(values, dtype=float)
    return np.abs(values - values[0])


def quantity_series(net: Parametrization, thetas, quantity: Quantity, X) -> np.ndarray:
    """Sampled quantity on the points X along a list of parameter vectors."""
    est = QuantityEstimator(net, quantity, X)
    return np.array([est.value(th) for th in thetas])
