"""Nonlinear parametrizations u(theta, x) and the derivative jets the schemes need.

Every parametrization here is written as a combination of basis functions,

    u(theta, x) = sum_i beta_i * phi_i(x, alpha),

with ``theta = [alpha, beta(, bias)]``.  Without an output bias this is the
separable form used by the weighted scheme; the periodic MLP, the fixed
function basis and the sine basis all fit it.

Forward jets (value, first and second spatial derivatives) are propagated
layer by layer.  The same code runs on numpy arrays for speed and on
``jax.numpy`` arrays when a JAX transformation needs to trace through it.
"""
from __future__ import annotations

import dataclasses
from functools import cached_property
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConstructionError, NonFiniteError

ACTIVATIONS = ("sin", "identity")
_ALIASES = {"sinusoidal": "sin", "linear": "identity"}


@dataclasses.dataclass(frozen=True)
class Architecture:
    """Feed-forward network with an optional periodic input layer.

    ``widths`` are the dense hidden layers that follow the input layer.  With
    ``period`` set, the input layer maps each coordinate through
    ``amp * sin(2*pi*x_j/L_j + phase) + offset`` summed over axes, which is
    periodic in every axis for any parameter values.
    """

    input_dim: int
    output_dim: int
    widths: tuple[int, ...] = (10, 10)
    activation: str = "sin"
    period: tuple[float, ...] | None = None
    periodic_width: int = 10
    output_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        act = _ALIASES.get(self.activation, self.activation)
        object.__setattr__(self, "activation", act)
        if self.period is not None:
            object.__setattr__(self, "period", tuple(float(L) for L in self.period))

    @property
    def separable(self) -> bool:
        return not self.output_bias

    def validate(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConstructionError("input_dim and output_dim must be >= 1")
        if any(w < 1 for w in self.widths):
            raise ConstructionError(f"hidden widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConstructionError(f"unknown activation {self.activation!r}")
        if self.period is not None:
            if len(self.period) != self.input_dim:
                raise ConstructionError(
                    f"period has {len(self.period)} entries for input_dim={self.input_dim}"
                )
            if any(not L > 0 for L in self.period):
                raise ConstructionError(f"periods must be > 0, got {self.period}")
            if self.periodic_width < 1:
                raise ConstructionError("periodic_width must be >= 1")


@dataclasses.dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    start: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


class Layout:
    """Bijection between named parameter blocks and flat indices."""

    def __init__(self, spec: Sequence[tuple[str, tuple[int, ...]]]):
        blocks, start = [], 0
        for name, shape in spec:
            block = Block(name, tuple(int(s) for s in shape), start)
            blocks.append(block)
            start = block.stop
        self.blocks = tuple(blocks)
        self.size = start
        self._by_name = {b.name: b for b in self.blocks}
        if len(self._by_name) != len(self.blocks):
            raise ConstructionError("duplicate block names in layout")

    def __getitem__(self, name: str) -> Block:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.blocks)

    def unflatten(self, theta) -> dict:
        return {b.name: theta[b.slice].reshape(b.shape) for b in self.blocks}

    def flatten(self, arrays: dict) -> np.ndarray:
        out = np.empty(self.size)
        for b in self.blocks:
            out[b.slice] = np.asarray(arrays[b.name]).reshape(-1)
        return out


@dataclasses.dataclass
class Jet:
    """Pointwise derivative information of u(theta, .).

    Arrays carry a leading sample axis when evaluated on a batch.  Fields not
    requested are ``None``.
    """

    value: np.ndarray
    du: np.ndarray | None = None
    d2u: np.ndarray | None = None
    grad_theta: np.ndarray | None = None
    grad_theta_of_du: np.ndarray | None = None

    def squeeze(self) -> "Jet":
        return Jet(*(None if a is None else a[0] for a in dataclasses.astuple(self)))


def _as_points(X, input_dim: int, xp=np):
    X = xp.asarray(X, dtype=xp.float64)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, input_dim) if input_dim == 1 else X.reshape(1, input_dim)
    if X.shape[-1] != input_dim:
        raise ConstructionError(f"points have dimension {X.shape[-1]}, expected {input_dim}")
    return X


class Parametrization:
    """Base class: u(theta, x) = features(x, alpha) @ beta (+ bias)."""

    input_dim: int
    output_dim: int
    layout: Layout
    n_alpha: int
    n_basis: int
    has_output_bias: bool = False

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def separable(self) -> bool:
        return not self.has_output_bias

    @property
    def n_beta(self) -> int:
        return self.n_basis * self.output_dim

    @property
    def alpha_slice(self) -> slice:
        return slice(0, self.n_alpha)

    @property
    def beta_slice(self) -> slice:
        return slice(self.n_alpha, self.n_alpha + self.n_beta)

    def features(self, theta, X, order=0, xp=np):
        """Basis values ``(n, n_basis)`` and spatial derivatives ``(n, n_basis, d[, d])``."""
        X = _as_points(X, self.input_dim, xp)
        phi, dphi, d2phi = self._features(theta, X, order, xp)
        if dphi is not None:
            dphi = xp.moveaxis(dphi, -1, 1)
        if d2phi is not None:
            d2phi = xp.moveaxis(d2phi, -1, 1)
        return phi, dphi, d2phi

    def _features(self, theta, X, order, xp):
        # width-last layout: (n, nb), (n, d, nb), (n, d, d, nb)
        raise NotImplementedError

    def forward(self, theta, X, order=0, xp=np):
        """Return ``(u, du, d2u)`` with shapes ``(n,m)``, ``(n,m,d)``, ``(n,m,d,d)``.

        Derivatives above ``order`` are returned as ``None``.
        """
        X = _as_points(X, self.input_dim, xp)
        phi, dphi, d2phi = self._features(theta, X, order, xp)
        B = theta[self.beta_slice].reshape(self.n_basis, self.output_dim)
        u = phi @ B
        if self.has_output_bias:
            u = u + theta[self.n_alpha + self.n_beta:]
        du = xp.swapaxes(dphi @ B, -1, -2) if order >= 1 else None
        d2u = xp.moveaxis(d2phi @ B, -1, 1) if order >= 2 else None
        return u, du, d2u

    def __call__(self, theta, X):
        return self.forward(theta, X, 0)[0]

    # -- parameter derivatives ------------------------------------------------

    def _u_single(self, theta, x):
        return self.forward(theta, x[None, :], 0, jnp)[0][0]

    def _du_single(self, theta, x):
        return self.forward(theta, x[None, :], 1, jnp)[1][0]

    @cached_property
    def _jax_param_jacobian(self):
        return jax.jit(jax.vmap(jax.jacrev(self._u_single), in_axes=(None, 0)))

    @cached_property
    def _jax_param_jacobian_du(self):
        return jax.jit(jax.vmap(jax.jacrev(self._du_single), in_axes=(None, 0)))

    def param_jacobian(self, theta, X) -> np.ndarray:
        """Per-sample gradient of u with respect to theta, shape ``(n, m, p)``."""
        X = _as_points(X, self.input_dim)
        return np.asarray(self._jax_param_jacobian(jnp.asarray(theta), jnp.asarray(X)))

    def param_jacobian_du(self, theta, X) -> np.ndarray:
        """Per-sample gradient of du with respect to theta, shape ``(n, m, d, p)``."""
        X = _as_points(X, self.input_dim)
        return np.asarray(self._jax_param_jacobian_du(jnp.asarray(theta), jnp.asarray(X)))


class PeriodicMLP(Parametrization):
    """Fully connected network, optional periodic input layer, linear output."""

    def __init__(self, arch: Architecture):
        arch.validate()
        self.arch = arch
        self.input_dim = arch.input_dim
        self.output_dim = arch.output_dim
        self.has_output_bias = arch.output_bias
        d, m = arch.input_dim, arch.output_dim
        spec = []
        width = d
        if arch.period is not None:
            w = arch.periodic_width
            spec += [("periodic.amp", (w, d)), ("periodic.phase", (w, d)), ("periodic.offset", (w,))]
            width = w
        for i, out in enumerate(arch.widths):
            spec += [(f"dense{i}.weight", (out, width)), (f"dense{i}.bias", (out,))]
            width = out
        self.n_basis = width
        self.n_alpha = sum(int(np.prod(s)) for _, s in spec)
        # stored as (n_basis, m) so that beta_i = output weights of basis i
        spec.append(("output.weight", (width, m)))
        if arch.output_bias:
            spec.append(("output.bias", (m,)))
        self.layout = Layout(spec)
        if arch.period is not None:
            self._omega = 2 * np.pi / np.asarray(arch.period)

    def init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.empty(self.n_params)
        for block in self.layout:
            if block.name == "periodic.phase":
                theta[block.slice] = rng.uniform(-np.pi, np.pi, block.size)
                continue
            if block.name.startswith("periodic"):
                fan_in = self.input_dim
            elif block.name == "output.weight" or block.name == "output.bias":
                fan_in = self.n_basis
            else:
                fan_in = self.layout[block.name.split(".")[0] + ".weight"].shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            theta[block.slice] = rng.uniform(-bound, bound, block.size)
        return theta

    def _dense_layers(self, P):
        return [(P[f"dense{i}.weight"], P[f"dense{i}.bias"]) for i in range(len(self.arch.widths))]

    def _features(self, theta, X, order, xp):
        P = self.layout.unflatten(theta)
        n, d = X.shape
        dh = d2h = None
        if self.arch.period is not None:
            amp, phase, offset = P["periodic.amp"], P["periodic.phase"], P["periodic.offset"]
            ph = X[:, :, None] * self._omega[:, None] + phase.T  # (n, d, w)
            s = xp.sin(ph)
            h = xp.sum(amp.T * s, axis=1) + offset
            if order >= 1:
                dh = (amp * self._omega).T * xp.cos(ph)
            if order >= 2:
                d2h = xp.eye(d)[:, :, None] * (-(amp * self._omega**2).T * s)[:, :, None, :]
        else:
            h = X
            if order >= 1:
                dh = xp.broadcast_to(xp.eye(d), (n, d, d))
            if order >= 2:
                d2h = xp.zeros((n, d, d, d))
        act_sin = self.arch.activation == "sin"
        for W, b in self._dense_layers(P):
            z = h @ W.T + b
            dz = dh @ W.T if order >= 1 else None
            d2z = d2h @ W.T if order >= 2 else None
            if act_sin:
                sz, cz = xp.sin(z), xp.cos(z)
                h = sz
                if order >= 1:
                    dh = cz[:, None, :] * dz
                if order >= 2:
                    d2h = (cz[:, None, None, :] * d2z
                           - sz[:, None, None, :] * dz[:, :, None, :] * dz[:, None, :, :])
            else:
                h, dh, d2h = z, dz, d2z
        return h, dh, d2h

    def param_jacobian(self, theta, X, out=None) -> np.ndarray:
        """Hand-written backpropagation for all samples at once, ``(n, m, p)``."""
        X = _as_points(X, self.input_dim)
        theta = np.asarray(theta)
        P = self.layout.unflatten(theta)
        n, m = X.shape[0], self.output_dim
        J = np.empty((n, m, self.n_params)) if out is None else out

        if self.arch.period is not None:
            amp, phase, offset = P["periodic.amp"], P["periodic.phase"], P["periodic.offset"]
            ph = X[:, None, :] * self._omega + phase
            s, c = np.sin(ph), np.cos(ph)
            h = np.sum(amp * s, axis=2) + offset
        else:
            h = X
        hs, dsig = [h], []
        for W, b in self._dense_layers(P):
            z = h @ W.T + b
            if self.arch.activation == "sin":
                h = np.sin(z)
                dsig.append(np.cos(z))
            else:
                h = z
                dsig.append(None)
            hs.append(h)

        blk = self.layout["output.weight"]
        J[:, :, blk.slice] = 0.0
        for k in range(m):
            J[:, k, blk.start + k:blk.stop:m] = hs[-1]
        if self.has_output_bias:
            blk = self.layout["output.bias"]
            J[:, :, blk.slice] = np.eye(m)

        g = np.broadcast_to(P["output.weight"].T, (n, m, self.n_basis))
        for i in range(len(self.arch.widths) - 1, -1, -1):
            W = P[f"dense{i}.weight"]
            delta = g if dsig[i] is None else g * dsig[i][:, None, :]
            wb, bb = self.layout[f"dense{i}.weight"], self.layout[f"dense{i}.bias"]
            J[:, :, wb.slice] = (delta[:, :, :, None] * hs[i][:, None, None, :]).reshape(n, m, -1)
            J[:, :, bb.slice] = delta
            g = delta @ W
        if self.arch.period is not None:
            J[:, :, self.layout["periodic.amp"].slice] = (g[..., None] * s[:, None]).reshape(n, m, -1)
            J[:, :, self.layout["periodic.phase"].slice] = (
                g[..., None] * (amp * c)[:, None]).reshape(n, m, -1)
            J[:, :, self.layout["periodic.offset"].slice] = g
        return J


class FunctionBasis(Parametrization):
    """u(theta, x) = sum_i theta_i psi_i(x) for fixed scalar functions psi_i.

    The functions are written with ``jax.numpy``; their spatial derivatives
    come from JAX.  Linear in theta, so ``n_alpha = 0``.
    """

    def __init__(self, functions: Sequence[Callable], input_dim: int = 1):
        self.functions = tuple(functions)
        self.input_dim = input_dim
        self.output_dim = 1
        self.n_basis = len(self.functions)
        self.n_alpha = 0
        self.layout = Layout([("output.weight", (self.n_basis, 1))])

        def psi(x):
            return jnp.stack([f(x[0] if input_dim == 1 else x) for f in self.functions])

        self._psi = jax.jit(jax.vmap(psi))
        self._dpsi = jax.jit(jax.vmap(jax.jacfwd(psi)))
        self._d2psi = jax.jit(jax.vmap(jax.hessian(psi)))
        self._psi_raw = jax.vmap(psi)
        self._dpsi_raw = jax.vmap(jax.jacfwd(psi))
        self._d2psi_raw = jax.vmap(jax.hessian(psi))

    def _features(self, theta, X, order, xp):
        if xp is np:
            Xj = jnp.asarray(X)
            phi = np.asarray(self._psi(Xj))
            dphi = np.asarray(self._dpsi(Xj)) if order >= 1 else None
            d2phi = np.asarray(self._d2psi(Xj)) if order >= 2 else None
        else:
            phi = self._psi_raw(X)
            dphi = self._dpsi_raw(X) if order >= 1 else None
            d2phi = self._d2psi_raw(X) if order >= 2 else None
        if dphi is not None:
            dphi = xp.moveaxis(dphi, 1, -1)
        if d2phi is not None:
            d2phi = xp.moveaxis(d2phi, 1, -1)
        return phi, dphi, d2phi


class SineBasis(Parametrization):
    """u(theta, x) = sum_i beta_i sin(alpha_i . x), separable with nonlinear alpha."""

    def __init__(self, n_basis: int, input_dim: int = 1, output_dim: int = 1):
        self.input_dim, self.output_dim, self.n_basis = input_dim, output_dim, n_basis
        self.layout = Layout([("alpha", (n_basis, input_dim)), ("output.weight", (n_basis, output_dim))])
        self.n_alpha = n_basis * input_dim

    def _features(self, theta, X, order, xp):
        a = theta[: self.n_alpha].reshape(self.n_basis, self.input_dim)
        z = X @ a.T
        s = xp.sin(z)
        dphi = d2phi = None
        if order >= 1:
            dphi = xp.cos(z)[:, None, :] * a.T
        if order >= 2:
            d2phi = -s[:, None, None, :] * a.T[:, None, :] * a.T[None, :, :]
        return s, dphi, d2phi


def build(arch: Architecture, seed: int = 0) -> tuple[PeriodicMLP, np.ndarray]:
    """Construct the network for ``arch`` and a seeded initial parameter vector."""
    net = PeriodicMLP(arch)
    return net, net.init(seed)


def _check_finite(name, arr):
    if arr is None:
        return
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))[0][0]
        raise NonFiniteError(f"non-finite {name} at sample {bad}")


def eval_jet(net: Parametrization, theta, x, order: int = 1, with_param_grads: bool = False) -> Jet:
    """Evaluate the requested derivative jet at one point or a batch of points.

    A single point (shape ``(d,)``, or a scalar when d = 1) gives unbatched
    arrays; a batch ``(n, d)`` keeps the sample axis.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 0 or (x_arr.ndim == 1 and (net.input_dim > 1 or x_arr.size == 1))
    X = _as_points(x_arr, net.input_dim)
    theta = np.asarray(theta, dtype=float)
    _check_finite("theta", theta[None])
    u, du, d2u = net.forward(theta, X, order)
    jet = Jet(np.asarray(u), du, d2u)
    if with_param_grads:
        jet.grad_theta = net.param_jacobian(theta, X)
        if order >= 1:
            jet.grad_theta_of_du = net.param_jacobian_du(theta, X)
    for field in dataclasses.fields(jet):
        _check_finite(field.name, getattr(jet, field.name))
    return jet.squeeze() if single else jet


@dataclasses.dataclass
class SeparableViews:
    """Split of a separable parametrization at a fixed theta.

    ``V(X)`` has shape ``(n, m, n_basis*m)`` and satisfies ``u = V @ beta``;
    ``dV(X)`` is its spatial derivative ``(n, m, d, n_basis*m)``;
    ``dalpha_V_beta(X)`` is ``(n, m, n_alpha)``.
    """

    net: Parametrization
    theta: np.ndarray

    @property
    def alpha(self):
        return self.theta[self.net.alpha_slice]

    @property
    def beta(self):
        return self.theta[self.net.beta_slice]

    def _kron(self, phi):
        # (n, nb, ...) -> (n, m, ..., nb*m) with Kronecker identity blocks
        m = self.net.output_dim
        eye = np.eye(m)
        if phi.ndim == 2:
            return np.einsum("ni,kl->nkil", phi, eye).reshape(phi.shape[0], m, -1)
        return np.einsum("nid,kl->nkdil", phi, eye).reshape(phi.shape[0], m, phi.shape[2], -1)

    def V(self, X):
        X = _as_points(X, self.net.input_dim)
        return self._kron(self.net.features(self.theta, X, 0)[0])

    def dV(self, X):
        X = _as_points(X, self.net.input_dim)
        return self._kron(self.net.features(self.theta, X, 1)[1])

    def dalpha_V_beta(self, X):
        return self.net.param_jacobian(self.theta, X)[:, :, self.net.alpha_slice]


def separable_views(net: Parametrization, theta) -> SeparableViews:
    if not net.separable:
        raise ConstructionError("parametrization has an output bias and is not separable")
    return SeparableViews(net, np.asarray(theta, dtype=float))
