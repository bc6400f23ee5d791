"""Fourier pseudo-spectral reference solvers for the benchmark models.

The state is kept in Fourier space (real FFTs along every axis) and advanced
with classic RK4.  Quadratic products are formed on the grid from fields
truncated by the 2/3 rule, so they are alias free.  Shallow water is solved
in the scaled variables (h - 1, phi + t) used by the network solver.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from .errors import ConfigError, NonFiniteError
from .models import PdeModel

RK4_STABILITY = 2.8     # imaginary-axis stability limit of RK4 is 2*sqrt(2)
BLOWUP = 1e6


@dataclasses.dataclass(frozen=True)
class SpectralField:
    """Real grid values ``(N_1, ..., N_d, m)`` on a periodic box at time t."""

    values: np.ndarray
    domain: tuple
    t: float

    @property
    def N(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    def axes(self) -> list[np.ndarray]:
        return grid_axes(self.domain, self.N)

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)


@dataclasses.dataclass
class SpectralSolution:
    """Stored frames of one reference solve."""

    model: str
    domain: tuple
    times: np.ndarray
    values: np.ndarray          # (n_times, N_1, ..., N_d, m)
    dt: float                   # largest internal step used

    @property
    def N(self) -> tuple[int, ...]:
        return self.values.shape[1:-1]

    def frame_index(self, t: float) -> int:
        lo, hi = self.times[0], self.times[-1]
        slack = 0.5 * self.dt
        if t < lo - slack or t > hi + slack:
            raise ValueError(f"t = {t} outside the stored range [{lo}, {hi}]")
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > slack:
            raise ValueError(f"no stored frame within dt/2 of t = {t} (nearest {self.times[i]})")
        return i

    def field(self, t: float) -> SpectralField:
        i = self.frame_index(t)
        return SpectralField(self.values[i], self.domain, float(self.times[i]))

    def __iter__(self):
        for t, v in zip(self.times, self.values):
            yield SpectralField(v, self.domain, float(t))

    def save(self, path):
        np.savez_compressed(path, model=self.model, domain=np.asarray(self.domain, dtype=float),
                            times=self.times, values=self.values, dt=self.dt)

    @classmethod
    def load(cls, path) -> "SpectralSolution":
        with np.load(path) as z:
            domain = tuple(tuple(float(v) for v in row) for row in z["domain"])
            return cls(str(z["model"]), domain, z["times"], z["values"], float(z["dt"]))


def grid_axes(domain, N) -> list[np.ndarray]:
    """Equidistant nodes per axis, right endpoint excluded."""
    return [lo + (hi - lo) * np.arange(n) / n for (lo, hi), n in zip(domain, N)]


class _Spectral:
    """Wavenumbers, derivative symbols and the dealiasing mask for an rfftn grid."""

    def __init__(self, domain, N, dealias: bool):
        self.domain, self.N = tuple(domain), tuple(int(n) for n in N)
        d = len(self.N)
        self.k, self._ik, keep = [], [], []
        for j, ((lo, hi), n) in enumerate(zip(self.domain, self.N)):
            idx = np.fft.rfftfreq(n, 1.0 / n) if j == d - 1 else np.fft.fftfreq(n, 1.0 / n)
            shape = [1] * d
            shape[j] = len(idx)
            k = (2 * np.pi / (hi - lo)) * idx
            self.k.append(k.reshape(shape))
            nyq = np.abs(idx) == n // 2
            # odd derivatives of the Nyquist mode are set to zero
            self._ik.append(np.where(nyq, 0.0, 1j * k).reshape(shape))
            keep.append((np.abs(idx) < n / 3.0 if dealias else ~nyq).reshape(shape))
        self.mask = np.ones([len(k.reshape(-1)) for k in self.k], dtype=bool)
        for kp in keep:
            self.mask = self.mask & kp
        self.k2 = sum(k * k for k in self.k)
        self.kmax = max(float(np.max(np.abs(k) * m)) for k, m in zip(self.k, keep))

    def ik(self, j):
        return self._ik[j]

    def fwd(self, u):
        return scipy.fft.rfftn(u, workers=1)

    def inv(self, U):
        return scipy.fft.irfftn(U, s=self.N, workers=1)


# -- right-hand sides in Fourier space -----------------------------------------

def _burgers_rhs(sp: _Spectral, U):
    u = sp.inv(U[0])
    return (-0.5 * sp.ik(0) * sp.fwd(u * u) * sp.mask)[None]


def _wave_rhs(sp: _Spectral, U, c=1.0, rho_ref=1.0):
    return np.stack([-rho_ref * sp.ik(0) * U[1], -(c**2 / rho_ref) * sp.ik(0) * U[0]])


def _swe_rhs(sp: _Spectral, U):
    d = len(sp.N)
    h = sp.inv(U[0])
    gphi = [sp.inv(sp.ik(j) * U[1]) for j in range(d)]
    gh = [sp.inv(sp.ik(j) * U[0]) for j in range(d)]
    lap = sp.inv(-sp.k2 * U[1])
    dh = -sum(a * b for a, b in zip(gh, gphi)) - (h + 1.0) * lap
    dphi = -0.5 * sum(g * g for g in gphi) - h
    return np.stack([sp.fwd(dh), sp.fwd(dphi)]) * sp.mask


def _speed(model: PdeModel, sp: _Spectral, U) -> float:
    """Bound on the spectral radius of the semi-discrete operator."""
    if model.name == "wave":
        return model.params.get("c", 1.0) * sp.kmax
    u = np.stack([sp.inv(Ui) for Ui in U])
    if model.name == "burgers":
        return float(np.max(np.abs(u[0]))) * sp.kmax
    gphi = np.stack([sp.inv(sp.ik(j) * U[1]) for j in range(len(sp.N))])
    wave_speed = math.sqrt(max(1.0 + float(np.max(u[0])), 0.0))
    return sp.kmax * (wave_speed + float(np.max(np.sqrt(np.sum(gphi**2, axis=0)))))


def _rhs_for(model: PdeModel) -> tuple[Callable, bool]:
    if model.name == "burgers":
        return _burgers_rhs, True
    if model.name == "wave":
        c, rho = model.params.get("c", 1.0), model.params.get("rho_ref", 1.0)
        return (lambda sp, U: _wave_rhs(sp, U, c, rho)), False
    if model.name == "swe":
        return _swe_rhs, True
    raise ConfigError(f"no spectral solver for model {model.name!r}")


def spectral_solve(model: PdeModel, u0, N, dt: float, T: float,
                   output_times: Sequence[float] | None = None) -> SpectralSolution:
    """Integrate ``model`` from ``u0`` on an N-point grid per axis up to T.

    ``u0`` is a callable on points ``(n, d)`` or an array ``(N..., m)``.
    Frames are stored at ``output_times`` (default: 0 and T).  Inside each
    output interval the step is the largest value not above ``dt`` that
    divides the interval evenly.
    """
    if np.ndim(N) == 0:
        N = (int(N),) * model.d
    N = tuple(int(n) for n in N)
    if any(n % 2 for n in N):
        raise ConfigError(f"grid sizes must be even, got {N}")
    if not (dt > 0 and T >= 0):
        raise ConfigError("need dt > 0 and T >= 0")
    rhs, dealias = _rhs_for(model)
    sp = _Spectral(model.domain, N, dealias)
    if callable(u0):
        grids = np.meshgrid(*grid_axes(model.domain, N), indexing="ij")
        X = np.stack([g.reshape(-1) for g in grids], axis=1)
        values0 = np.asarray(u0(X), dtype=float).reshape(N + (model.m,))
    else:
        values0 = np.asarray(u0, dtype=float).reshape(N + (model.m,))
    U = np.stack([sp.fwd(values0[..., i]) for i in range(model.m)]) * sp.mask

    out = np.array(sorted(set([0.0, float(T)] if output_times is None else [float(t) for t in output_times])))
    if out[0] < 0 or out[-1] > T + 1e-12:
        raise ConfigError("output times must lie in [0, T]")
    frames = []
    t, h_max = 0.0, 0.0

    def grid_values(U):
        return np.stack([sp.inv(Ui) for Ui in U], axis=-1)

    for t_out in out:
        span = t_out - t
        n_sub = max(int(math.ceil(span / dt - 1e-9)), 0)
        if n_sub:
            h = span / n_sub
            h_max = max(h_max, h)
            lam = _speed(model, sp, U)
            if h * lam > RK4_STABILITY:
                raise ConfigError(
                    f"time step {h:.3g} violates the RK4 stability bound {RK4_STABILITY / lam:.3g} for N = {N}"
                )
            for _ in range(n_sub):
                k1 = rhs(sp, U)
                k2 = rhs(sp, U + 0.5 * h * k1)
                k3 = rhs(sp, U + 0.5 * h * k2)
                k4 = rhs(sp, U + h * k3)
                U = U + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t_out
        v = grid_values(U)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP:
            raise NonFiniteError(f"reference solution blew up before t = {t_out:g}")
        frames.append(v)
    return SpectralSolution(model.name, tuple(tuple(b) for b in model.domain), out, np.stack(frames),
                            h_max if h_max > 0 else float(dt))


# -- evaluation off the grid ------------------------------------------------------

def _interp_matrix(x, lo, L, n):
    """Rows evaluate the trigonometric interpolant of n equidistant samples at x."""
    idx = np.fft.fftfreq(n, 1.0 / n)
    phase = (2 * np.pi / L) * (np.asarray(x, dtype=float)[:, None] - lo)
    E = np.exp(1j * phase * idx[None, :])
    nyq = n // 2
    E[:, nyq] = np.cos(phase[:, 0] * nyq)
    return E / n


def _tensor_axes(X, d):
    """Axes if X is an 'ij'-ordered tensor grid, else None."""
    axes = [np.unique(X[:, j]) for j in range(d)]
    if np.prod([len(a) for a in axes]) != len(X):
        return None
    grids = np.meshgrid(*axes, indexing="ij")
    G = np.stack([g.reshape(-1) for g in grids], axis=1)
    return axes if np.array_equal(G, X) else None


def interpolate(field: SpectralField, X, chunk: int = 2048) -> np.ndarray:
    """Trigonometric interpolation of a grid field at points ``(n, d)`` -> ``(n, m)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d = len(field.N)
    if X.shape[1] != d:
        raise ValueError(f"points have dimension {X.shape[1]}, field has {d}")
    m = field.values.shape[-1]
    C = np.stack([scipy.fft.fftn(field.values[..., i], workers=1) for i in range(m)])  # (m, N...)
    dom = field.domain
    if d == 1:
        E = _interp_matrix(X[:, 0], dom[0][0], dom[0][1] - dom[0][0], field.N[0])
        return np.real(E @ C.T)
    if d != 2:
        raise ValueError("interpolation implemented for d = 1 and d = 2")
    axes = _tensor_axes(X, d)
    Ls = [hi - lo for lo, hi in dom]
    if axes is not None:
        Ex = _interp_matrix(axes[0], dom[0][0], Ls[0], field.N[0])
        Ey = _interp_matrix(axes[1], dom[1][0], Ls[1], field.N[1])
        out = np.stack([np.real(Ex @ C[i] @ Ey.T).reshape(-1) for i in range(m)], axis=1)
        return out
    out = np.empty((len(X), m))
    for s in range(0, len(X), chunk):
        Xs = X[s:s + chunk]
        Ex = _interp_matrix(Xs[:, 0], dom[0][0], Ls[0], field.N[0])
        Ey = _interp_matrix(Xs[:, 1], dom[1][0], Ls[1], field.N[1])
        for i in range(m):
            out[s:s + chunk, i] = np.real(np.sum((Ex @ C[i]) * Ey, axis=1))
    return out


def sample_reference(solution: SpectralSolution, t: float, X) -> np.ndarray:
    """Reference values at time t (a stored frame within dt/2) and points X."""
    return interpolate(solution.field(t), X)


def grid_quantity(field: SpectralField, kernel: Callable) -> float:
    """Grid mean of ``kernel(u, du)`` with spectral first derivatives."""
    sp = _Spectral(field.domain, field.N, dealias=False)
    m, d = field.values.shape[-1], len(field.N)
    u = field.values.reshape(-1, m)
    du = np.empty((u.shape[0], m, d))
    for i in range(m):
        U = sp.fwd(field.values[..., i])
        for j in range(d):
            du[:, i, j] = sp.inv(sp.ik(j) * U).reshape(-1)
    return float(np.mean(kernel(u, du)))
