"""Benchmark PDEs, their conserved quantities and sampled estimators.

The measure on the spatial domain is the uniform probability measure, so
every integral is estimated by a plain sample mean.  Right-hand sides,
kernels and Hamiltonian pieces only use array arithmetic plus the namespace
returned by :func:`xp_of`, so they trace under JAX as well as run on numpy.
"""
from __future__ import annotations

import dataclasses
from functools import partial
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConstructionError
from .params import Jet, Parametrization


def xp_of(a):
    return jnp if isinstance(a, jax.Array) else np


@dataclasses.dataclass(frozen=True)
class Quantity:
    """Integral quantity ``int kappa(u, du) dnu`` with a target frozen at t = 0.

    ``kernel(u, du)`` maps batched values ``(n, m)`` and gradients
    ``(n, m, d)`` to ``(n,)``.
    """

    name: str
    kernel: Callable
    order: int = 0
    target: float | None = None

    def with_target(self, target: float) -> "Quantity":
        return dataclasses.replace(self, target=float(target))

    def density(self, jet: Jet):
        return self.kernel(jet.value, jet.du)


@dataclasses.dataclass(frozen=True)
class HamiltonianStructure:
    """Interconnection operator J, weight Q and Hamiltonian density h.

    ``j_apply(v, dv, q, dq)`` evaluates ``(J(v) q)(x)`` from the values and
    spatial gradients of v and q.  ``q_eval(u)`` returns ``(n, m, m)``;
    ``q_dx(u, du)``, when given, returns the spatial derivative of Q(u(x)) as
    ``(n, m, m, d)``.  ``None`` means Q is constant.
    """

    j_apply: Callable
    q_eval: Callable
    density: Callable
    q_dx: Callable | None = None


@dataclasses.dataclass(frozen=True)
class PdeModel:
    name: str
    d: int
    m: int
    domain: tuple[tuple[float, float], ...]
    rhs: Callable
    rhs_order: int
    quantities: tuple[Quantity, ...] = ()
    hamiltonian: HamiltonianStructure | None = None
    initial_condition: Callable | None = None
    params: dict = dataclasses.field(default_factory=dict)

    @property
    def period(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in self.domain)

    def quantity(self, name: str) -> Quantity:
        for q in self.quantities:
            if q.name == name:
                return q
        raise KeyError(name)

    def with_quantities(self, quantities) -> "PdeModel":
        return dataclasses.replace(self, quantities=tuple(quantities))


@dataclasses.dataclass(frozen=True)
class SampleSet:
    """Sample points with a role tag (galerkin, quantity, test, fit)."""

    points: np.ndarray
    role: str = "galerkin"
    spacing: str = "equidistant"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if len(pts) == 0:
            raise ValueError("sample set is empty")

    def __len__(self):
        return len(self.points)

    @classmethod
    def equidistant(cls, domain, n_per_axis, role="galerkin", offset=0.0) -> "SampleSet":
        """Tensor grid ``lo + (i + offset) * h`` per axis, right endpoint excluded."""
        if np.ndim(n_per_axis) == 0:
            n_per_axis = [int(n_per_axis)] * len(domain)
        axes = [lo + (np.arange(n) + offset) * (hi - lo) / n for (lo, hi), n in zip(domain, n_per_axis)]
        grids = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([g.reshape(-1) for g in grids], axis=1), role, "equidistant")

    @classmethod
    def random(cls, domain, n, role="galerkin", seed=0) -> "SampleSet":
        rng = np.random.default_rng(seed)
        lo = np.array([a for a, _ in domain])
        hi = np.array([b for _, b in domain])
        return cls(lo + (hi - lo) * rng.random((n, len(domain))), role, "random")


# -- right-hand sides ---------------------------------------------------------

def rhs_burgers(jet: Jet, x=None):
    """Inviscid Burgers: f = -u u_x."""
    return -jet.value * jet.du[..., 0]


def rhs_wave(jet: Jet, x=None, c: float = 1.0, rho_ref: float = 1.0):
    """Acoustic wave in (rho, v): f = (-rho_ref v_x, -(c^2/rho_ref) rho_x)."""
    xp = xp_of(jet.du)
    rho_x, v_x = jet.du[..., 0, 0], jet.du[..., 1, 0]
    return xp.stack([-rho_ref * v_x, -(c**2 / rho_ref) * rho_x], axis=-1)


def rhs_swe(jet: Jet, x=None):
    """Scaled shallow water in (h~, phi~).

    f = (-grad h . grad phi - (h + 1) lap phi, -|grad phi|^2 / 2 - h).
    """
    xp = xp_of(jet.du)
    h = jet.value[..., 0]
    gh, gp = jet.du[..., 0, :], jet.du[..., 1, :]
    lap = jet.d2u[..., 1, 0, 0] + jet.d2u[..., 1, 1, 1]
    dh = -xp.sum(gh * gp, axis=-1) - (h + 1.0) * lap
    dphi = -0.5 * xp.sum(gp * gp, axis=-1) - h
    return xp.stack([dh, dphi], axis=-1)


# -- Hamiltonian structure ----------------------------------------------------

def _burgers_j(v, dv, q, dq):
    # -(1/3)(d_x(v q) + v d_x q) = -(1/3)(v_x q + 2 v q_x)
    return -(dv[..., 0] * q + 2.0 * v * dq[..., 0]) / 3.0


def _wave_j(v, dv, q, dq):
    xp = xp_of(dq)
    return xp.stack([-dq[..., 1, 0], -dq[..., 0, 0]], axis=-1)


def _burgers_q(u):
    xp = xp_of(u)
    return xp.ones(u.shape[:-1] + (1, 1))


def _wave_q(u, c=1.0, rho_ref=1.0):
    xp = xp_of(u)
    Q = xp.diag(xp.asarray([c**2 / rho_ref, rho_ref]))
    return xp.broadcast_to(Q, u.shape[:-1] + (2, 2))


def _burgers_density(u):
    return 0.5 * u[..., 0] ** 2


def _wave_density(u, c=1.0, rho_ref=1.0):
    return 0.5 * (c**2 / rho_ref * u[..., 0] ** 2 + rho_ref * u[..., 1] ** 2)


def _mass(u, du=None):
    return u[..., 0]


def _swe_energy(u, du):
    # 1/2 (h |grad phi|^2 + h^2) with h = h~ + 1 and grad phi = grad phi~
    xp = xp_of(du)
    h = u[..., 0] + 1.0
    return 0.5 * (h * xp.sum(du[..., 1, :] ** 2, axis=-1) + h**2)


def _periodized_gaussian(X, domain, width, amplitude=1.0, images=2):
    """amplitude * sum over periodic images of exp(-width |x|^2)."""
    X = np.atleast_2d(X)
    L = np.array([hi - lo for lo, hi in domain])
    out = np.zeros(len(X))
    shifts = np.array(np.meshgrid(*[np.arange(-images, images + 1)] * X.shape[1], indexing="ij"))
    for shift in shifts.reshape(X.shape[1], -1).T:
        out += np.exp(-width * np.sum((X + shift * L) ** 2, axis=1))
    return amplitude * out


def j_apply(model: PdeModel, v_jet: Jet, q_jet: Jet, x=None):
    """(J(v) q)(x) for a model with Hamiltonian structure."""
    if model.hamiltonian is None:
        raise ConstructionError(f"model {model.name!r} has no Hamiltonian structure")
    return model.hamiltonian.j_apply(v_jet.value, v_jet.du, q_jet.value, q_jet.du)


def q_eval(model: PdeModel, u):
    """Weight matrix Q(u(x)), shape ``(..., m, m)``."""
    if model.hamiltonian is None:
        raise ConstructionError(f"model {model.name!r} has no Hamiltonian structure")
    return model.hamiltonian.q_eval(u)


# -- model factories ----------------------------------------------------------

def burgers(quantities=("mass",)) -> PdeModel:
    domain = ((-1.0, 1.0),)
    available = {
        "mass": Quantity("mass", _mass, 0),
        "hamiltonian": Quantity("hamiltonian", lambda u, du=None: _burgers_density(u), 0),
    }
    return PdeModel(
        name="burgers", d=1, m=1, domain=domain,
        rhs=rhs_burgers, rhs_order=1,
        quantities=tuple(available[q] for q in quantities),
        hamiltonian=HamiltonianStructure(_burgers_j, _burgers_q, _burgers_density),
        initial_condition=lambda X: _periodized_gaussian(X, domain, 25.0)[:, None],
    )


def wave(c: float = 1.0, rho_ref: float = 1.0, quantities=("hamiltonian",)) -> PdeModel:
    domain = ((-1.0, 1.0),)
    density = partial(_wave_density, c=c, rho_ref=rho_ref)
    available = {
        "hamiltonian": Quantity("hamiltonian", lambda u, du=None: density(u), 0),
        "mass": Quantity("mass", _mass, 0),
    }

    def u0(X):
        rho = _periodized_gaussian(X, domain, 9.0)
        return np.stack([rho, np.zeros_like(rho)], axis=1)

    return PdeModel(
        name="wave", d=1, m=2, domain=domain,
        rhs=partial(rhs_wave, c=c, rho_ref=rho_ref), rhs_order=1,
        quantities=tuple(available[q] for q in quantities),
        hamiltonian=HamiltonianStructure(_wave_j, partial(_wave_q, c=c, rho_ref=rho_ref), density),
        initial_condition=u0,
        params={"c": c, "rho_ref": rho_ref},
    )


def shallow_water(quantities=("energy",)) -> PdeModel:
    domain = ((-4.0, 4.0), (-4.0, 4.0))
    available = {
        "energy": Quantity("energy", _swe_energy, 1),
        "mass": Quantity("mass", _mass, 0),
    }

    def u0(X):
        h = _periodized_gaussian(X, domain, 1.7, amplitude=0.33, images=1)
        return np.stack([h, np.zeros_like(h)], axis=1)

    return PdeModel(
        name="swe", d=2, m=2, domain=domain,
        rhs=rhs_swe, rhs_order=2,
        quantities=tuple(available[q] for q in quantities),
        hamiltonian=None,
        initial_condition=u0,
    )


MODELS = {"burgers": burgers, "wave": wave, "swe": shallow_water}


def get_model(name: str, **kwargs) -> PdeModel:
    try:
        return MODELS[name](**kwargs)
    except KeyError:
        raise ConstructionError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


# -- sampled quantities -------------------------------------------------------

class QuantityEstimator:
    """Jitted sample-mean estimator of one quantity and its theta-gradient."""

    def __init__(self, net: Parametrization, quantity: Quantity, points):
        self.net, self.quantity = net, quantity
        X = jnp.asarray(np.asarray(points, dtype=float))

        def value(theta):
            u, du, _ = net.forward(theta, X, quantity.order, jnp)
            return jnp.mean(quantity.kernel(u, du))

        self._value = jax.jit(value)
        self._value_and_grad = jax.jit(jax.value_and_grad(value))

    def value(self, theta) -> float:
        return float(self._value(jnp.asarray(theta)))

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        v, g = self._value_and_grad(jnp.asarray(theta))
        return float(v), np.asarray(g)

    def grad(self, theta) -> np.ndarray:
        return self.value_and_grad(theta)[1]


def estimate_quantity(q: Quantity, net: Parametrization, theta, S: SampleSet) -> float:
    """Sample mean of the kernel over ``S``."""
    u, du, _ = net.forward(np.asarray(theta, dtype=float), S.points, q.order)
    return float(np.mean(q.kernel(u, du)))


def quantity_param_grad(q: Quantity, net: Parametrization, theta, S: SampleSet) -> np.ndarray:
    """Gradient of :func:`estimate_quantity` with respect to theta."""
    return QuantityEstimator(net, q, S.points).grad(theta)
