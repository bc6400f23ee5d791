"""Experiment configuration: YAML schema, overrides and validation."""
from __future__ import annotations

import copy
import dataclasses
import os
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError
from ..models import MODELS, PdeModel, SampleSet, get_model
from ..params import Architecture
from ..timeint import IntegratorConfig

VARIANTS = {
    "plain": dict(constrain=False, embed=False, weighted=False),
    "constrained": dict(constrain=True, embed=False, weighted=False),
    "embedded": dict(constrain=True, embed=True, weighted=False),
    "projected": dict(constrain=False, embed=True, weighted=False),
    "weighted": dict(constrain=False, embed=False, weighted=True),
}

OUTPUT_ROOT_ENV = "NGEMBED_OUTPUT_ROOT"

DEFAULTS = {
    "name": None,
    "model": {"name": None, "params": {}, "quantities": None},
    "architecture": {"widths": [10, 10], "activation": "sin", "periodic_width": 10, "output_bias": False},
    "sampling": {"n_galerkin": None, "n_quantity": None, "n_test": None, "n_fit": None,
                 "quantity_on_galerkin": None},
    "time": {"dt": None, "T": None, "scheme": "rk4", "store_every": 1},
    "variant": "embedded",
    "solver": {"reg": 1e-8, "weighted_reg": 1e-12, "lsq_method": "normal", "embed_tol": 1e-12,
               "embed_kmax": 50, "on_embed_failure": "abort"},
    "fit": {"rmse_tol": 1e-5, "max_iter": 2000, "ridge": 1e-9},
    "reference": {"enabled": True, "N": None, "dt": 1e-3},
    "seed": 0,
    "output": {"dir": None, "trajectory_format": "csv"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def preset_names() -> list[str]:
    files = resources.files("ngembed.xcli").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def read_config(source) -> dict:
    """Raw mapping from a path, a preset name, or YAML text."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    text = None
    path = Path(str(source))
    if path.suffix in (".yaml", ".yml") and path.exists():
        text = path.read_text()
    elif str(source) in preset_names():
        text = resources.files("ngembed.xcli").joinpath("presets", f"{source}.yaml").read_text()
    elif "\n" in str(source) or ":" in str(source):
        text = str(source)
    if text is None:
        raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"could not parse config: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    return raw


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return out


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: PdeModel
    architecture: Architecture
    integrator: IntegratorConfig
    variant: str
    n_galerkin: int
    n_quantity: int
    n_test: int
    n_fit: int
    quantity_on_galerkin: bool
    fit_rmse_tol: float
    fit_max_iter: int
    fit_ridge: float
    reference: dict
    seed: int
    output_dir: Path
    trajectory_format: str
    resolved: dict

    # -- sample sets --------------------------------------------------------

    def galerkin_samples(self) -> SampleSet:
        return SampleSet.equidistant(self.model.domain, self.n_galerkin, "galerkin")

    def quantity_samples(self) -> SampleSet:
        if self.quantity_on_galerkin:
            return SampleSet(self.galerkin_samples().points, "quantity")
        return SampleSet.equidistant(self.model.domain, self.n_quantity, "quantity")

    def fit_samples(self) -> SampleSet:
        return SampleSet.equidistant(self.model.domain, self.n_fit, "fit", offset=0.1)

    def test_samples(self) -> SampleSet:
        return disjoint_test_grid(self.model.domain, self.n_test,
                                  [self.galerkin_samples(), self.quantity_samples()])


TEST_OFFSETS = (0.5, 0.25, 0.375, 0.125, 0.3, 0.7)


def disjoint_test_grid(domain, n, others, atol: float = 1e-12) -> SampleSet:
    """Equidistant test grid shifted so no node coincides with any node of ``others``.

    Half a cell is tried first; other fractions follow when the grids share
    nodes.
    """
    for offset in TEST_OFFSETS:
        cand = SampleSet.equidistant(domain, n, "test", offset=offset)
        if all(_axis_disjoint(cand.points, o.points, atol) for o in others):
            return cand
    raise ConfigError(f"could not place {n} test points per axis away from the training points")


def _axis_disjoint(A, B, atol):
    # tensor grids share a node only if every axis shares a coordinate; for
    # scattered points one disjoint axis is still sufficient
    for j in range(A.shape[1]):
        a, b = np.unique(A[:, j]), np.unique(B[:, j])
        idx = np.searchsorted(b, a)
        below = np.abs(a - b[np.clip(idx - 1, 0, len(b) - 1)])
        above = np.abs(a - b[np.clip(idx, 0, len(b) - 1)])
        if np.all(np.minimum(below, above) > atol):
            return True
    return False


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _positive_int(value, name):
    _require(isinstance(value, (int, np.integer)) and not isinstance(value, bool) and value > 0,
             f"{name} must be a positive integer, got {value!r}")
    return int(value)


def resolve(raw: dict, output_root: str | None = None) -> ExperimentConfig:
    """Fill defaults, validate, and build the typed configuration."""
    unknown = set(raw) - set(DEFAULTS)
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    m = cfg["model"]
    _require(m["name"] in MODELS, f"model.name must be one of {sorted(MODELS)}, got {m['name']!r}")
    kwargs = dict(m.get("params") or {})
    if m.get("quantities") is not None:
        kwargs["quantities"] = tuple(m["quantities"])
    try:
        model = get_model(m["name"], **kwargs)
    except (KeyError, TypeError) as err:
        raise ConfigError(f"bad model settings: {err}") from err

    variant = cfg["variant"]
    _require(variant in VARIANTS, f"variant must be one of {sorted(VARIANTS)}, got {variant!r}")

    a = cfg["architecture"]
    try:
        arch = Architecture(
            input_dim=model.d, output_dim=model.m, widths=tuple(a["widths"]), activation=a["activation"],
            period=model.period, periodic_width=int(a["periodic_width"]), output_bias=bool(a["output_bias"]),
        )
        arch.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err

    s = cfg["sampling"]
    n_s = _positive_int(s["n_galerkin"], "sampling.n_galerkin")
    n_m = _positive_int(s["n_quantity"] if s["n_quantity"] is not None else n_s, "sampling.n_quantity")
    n_e = _positive_int(s["n_test"] if s["n_test"] is not None else 2 * n_s, "sampling.n_test")
    n_f = _positive_int(s["n_fit"] if s["n_fit"] is not None else 5 * n_s, "sampling.n_fit")
    on_g = s["quantity_on_galerkin"]
    on_g = (n_m == n_s) if on_g is None else bool(on_g)
    _require(not on_g or n_m == n_s, "quantity_on_galerkin needs n_quantity == n_galerkin")

    t = cfg["time"]
    _require(t["dt"] is not None and t["T"] is not None, "time.dt and time.T are required")
    sol = cfg["solver"]
    try:
        integ = IntegratorConfig.from_horizon(
            float(t["T"]), float(t["dt"]), scheme=t["scheme"], store_every=int(t["store_every"]),
            reg=float(sol["reg"]), weighted_reg=float(sol["weighted_reg"]), lsq_method=sol["lsq_method"],
            embed_tol=float(sol["embed_tol"]), embed_kmax=int(sol["embed_kmax"]),
            on_embed_failure=sol["on_embed_failure"], **VARIANTS[variant],
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    if integ.embed or integ.constrain:
        _require(len(model.quantities) > 0, f"variant {variant!r} needs at least one quantity")
    if integ.weighted:
        _require(model.hamiltonian is not None, f"model {model.name!r} has no Hamiltonian structure")

    ref = dict(cfg["reference"])
    if ref.get("N") is None:
        ref["N"] = {"burgers": 2048, "wave": 256, "swe": 300}[model.name]
    ref["N"] = _positive_int(ref["N"], "reference.N")
    _require(ref["N"] % 2 == 0, "reference.N must be even")
    ref["dt"] = float(ref["dt"])

    name = cfg["name"] or f"{model.name}-{variant}"
    out = cfg["output"]
    _require(out["trajectory_format"] in ("csv", "binary"), "output.trajectory_format must be csv or binary")
    out_dir = Path(out["dir"] or os.path.join("runs", name))
    root = output_root if output_root is not None else os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out_dir.is_absolute():
        out_dir = Path(root) / out_dir
    cfg["name"] = name

    exp = ExperimentConfig(
        name=name, model=model, architecture=arch, integrator=integ, variant=variant,
        n_galerkin=n_s, n_quantity=n_m, n_test=n_e, n_fit=n_f, quantity_on_galerkin=on_g,
        fit_rmse_tol=float(cfg["fit"]["rmse_tol"]), fit_max_iter=int(cfg["fit"]["max_iter"]),
        fit_ridge=float(cfg["fit"]["ridge"]),
        reference=ref, seed=int(cfg["seed"]), output_dir=out_dir,
        trajectory_format=out["trajectory_format"], resolved=cfg,
    )
    # fail early if no disjoint test grid exists
    exp.test_samples()
    return exp


def load(source, overrides=(), output_root: str | None = None) -> ExperimentConfig:
    return resolve(apply_overrides(read_config(source), overrides), output_root)
