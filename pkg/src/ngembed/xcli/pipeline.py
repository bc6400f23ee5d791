"""End-to-end benchmark run: fit, integrate, reference, metrics, files."""
from __future__ import annotations

import logging
import platform
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..params import build
from ..reference import SpectralSolution, spectral_solve
from ..timeint import NeuralGalerkin, Trajectory, fit_initial
from . import io
from .config import ExperimentConfig
from .metrics import conservation_error, quantity_series, relative_error_series

log = logging.getLogger(__name__)


def versions() -> dict:
    import jax
    import scipy
    import yaml

    return {"ngembed": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "jax": jax.__version__, "pyyaml": yaml.__version__}


def output_times(cfg: ExperimentConfig) -> np.ndarray:
    """Times of the stored trajectory states."""
    integ = cfg.integrator
    steps = list(range(0, integ.n_steps + 1, integ.store_every))
    if steps[-1] != integ.n_steps:
        steps.append(integ.n_steps)
    return np.array(steps) * integ.dt


def fit(cfg: ExperimentConfig):
    net, _ = build(cfg.architecture, cfg.seed)
    theta0, rmse = fit_initial(net, cfg.model.initial_condition, cfg.fit_samples(), seed=cfg.seed,
                               rmse_tol=cfg.fit_rmse_tol, max_iter=cfg.fit_max_iter, ridge=cfg.fit_ridge)
    return net, theta0, rmse


def reference_solution(cfg: ExperimentConfig, cache: Path | None = None) -> SpectralSolution:
    """Spectral reference at the stored times, reused from ``cache`` when it matches."""
    times = output_times(cfg)
    N, dt = cfg.reference["N"], cfg.reference["dt"]
    if cache is not None and Path(cache).exists():
        sol = SpectralSolution.load(cache)
        if (sol.model == cfg.model.name and sol.N == (N,) * cfg.model.d and len(sol.times) == len(times)
                and np.allclose(sol.times, times, atol=1e-12) and sol.dt <= dt * (1 + 1e-12)):
            return sol
    sol = spectral_solve(cfg.model, cfg.model.initial_condition, N, dt, cfg.integrator.T, times)
    if cache is not None:
        tmp = Path(cache).with_suffix(".tmp.npz")
        sol.save(tmp)
        tmp.replace(cache)
    return sol


def integrate(cfg: ExperimentConfig, net, theta0) -> Trajectory:
    ng = NeuralGalerkin(net, cfg.model, cfg.integrator, cfg.galerkin_samples(), cfg.quantity_samples())
    return ng.run(theta0)


def compute_metrics(cfg: ExperimentConfig, net, traj: Trajectory, reference: SpectralSolution | None) -> dict:
    X = cfg.test_samples().points
    cols = {"time": traj.times}
    if reference is not None:
        cols["E_r"] = relative_error_series(net, traj.times, traj.thetas, reference, X)
    q_hat = {}
    for q in cfg.model.quantities:
        q_hat[q.name] = quantity_series(net, traj.thetas, q, X)
        cols[f"E_C_{q.name}"] = conservation_error(q_hat[q.name])
    for name, values in q_hat.items():
        cols[f"q_hat_{name}"] = values
    per_step = traj.steps - 1
    iters = np.zeros(len(traj.times), dtype=np.int64)
    resid = np.zeros(len(traj.times))
    iters[1:] = traj.embed_iters[per_step[1:]]
    resid[1:] = traj.lsq_residual[per_step[1:]]
    cols["embed_iters"] = iters
    cols["lsq_residual"] = resid
    return cols


def embed_distribution(traj: Trajectory) -> dict:
    it = np.asarray(traj.embed_iters)
    if it.size == 0:
        return {}
    values, counts = np.unique(it, return_counts=True)
    return {"median": float(np.median(it)), "mean": float(np.mean(it)), "max": int(it.max()),
            "min": int(it.min()), "histogram": {str(int(v)): int(c) for v, c in zip(values, counts)}}


def run_experiment(cfg: ExperimentConfig, theta0=None, reference: SpectralSolution | None = None,
                   write: bool = True) -> dict:
    """Run one configured experiment; returns a summary with metrics and the trajectory."""
    t_start = time.perf_counter()
    net, _ = build(cfg.architecture, cfg.seed)
    fit_rmse = None
    if theta0 is None:
        net, theta0, fit_rmse = fit(cfg)
    t_fit = time.perf_counter()
    traj = integrate(cfg, net, theta0)
    t_run = time.perf_counter()
    if reference is None and cfg.reference.get("enabled", True):
        cache = cfg.output_dir / "reference.npz" if write else None
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
        reference = reference_solution(cfg, cache)
    cols = compute_metrics(cfg, net, traj, reference)
    t_end = time.perf_counter()

    summary = {
        "name": cfg.name, "variant": cfg.variant, "model": cfg.model.name, "p": net.n_params,
        "fit_rmse": fit_rmse,
        "max_E_r": float(np.max(cols["E_r"])) if "E_r" in cols else None,
        "final_E_r": float(cols["E_r"][-1]) if "E_r" in cols else None,
        "max_E_C": {q.name: float(np.max(cols[f"E_C_{q.name}"])) for q in cfg.model.quantities},
        "final_E_C": {q.name: float(cols[f"E_C_{q.name}"][-1]) for q in cfg.model.quantities},
        "train_drift": dict(zip(traj.quantity_names, traj.quantity_drift().tolist())),
        "embed_iterations": embed_distribution(traj) if cfg.integrator.embed else {},
        "max_lsq_residual": float(np.max(traj.lsq_residual, initial=0.0)),
        "timing_s": {"fit": t_fit - t_start, "integrate": t_run - t_fit, "metrics": t_end - t_run},
    }
    if write:
        out = cfg.output_dir
        m, d = cfg.model.m, cfg.model.d
        if cfg.trajectory_format == "csv":
            io.write_trajectory_csv(out / "trajectory.csv", traj.times, traj.thetas, m, d)
        else:
            io.write_trajectory_binary(out / "trajectory.bin", traj.times, traj.thetas, m, d)
        io.write_metrics_csv(out / "metrics.csv", cols)
        io.write_json(out / "manifest.json", {
            "config": cfg.resolved, "seed": cfg.seed, "versions": versions(), "summary": summary,
            "theta0_norm": float(np.linalg.norm(theta0)),
            "samples": {"n_galerkin": cfg.n_galerkin, "n_quantity": cfg.n_quantity, "n_test": cfg.n_test,
                        "n_fit": cfg.n_fit, "quantity_on_galerkin": cfg.quantity_on_galerkin},
        })
    summary["metrics"] = cols
    summary["trajectory"] = traj
    summary["theta0"] = theta0
    summary["net"] = net
    return summary
