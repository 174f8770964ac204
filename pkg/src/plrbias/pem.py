"""Offline prediction-error estimation (damped Gauss-Newton / Levenberg-Marquardt)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .loop_sim import DataRecord
from .models import EstimationResult, ModelStructure, prediction_error
from .plr import stationarity_stats
from .signals import rng


class PemError(RuntimeError):
    """Estimation could not start or diverged; ``trace`` holds the iteration log."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class PemOptions:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-12
    damping_init: float = 1e-3
    damping_up: float = 4.0
    damping_down: float = 3.0
    damping_max: float = 1e16
    multistart: int = 5
    perturbation: float = 0.05
    fd_step: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("gradient_tolerance", "step_tolerance", "damping_init", "fd_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.damping_up <= 1 or self.damping_down <= 1:
            raise ValueError("damping factors must exceed 1")
        if self.multistart < 1 or self.max_iterations < 1:
            raise ValueError("multistart and max_iterations must be >= 1")


def residuals(structure: ModelStructure, theta, data: DataRecord) -> Optional[np.ndarray]:
    """Prediction errors after the transient, or None when the predictor is unstable."""
    if not structure.predictor_poly(theta).is_stable():
        return None
    return prediction_error(structure, theta, data)[structure.transient :]


def pem_loss(structure: ModelStructure, theta, data: DataRecord) -> float:
    """Mean squared one-step prediction error; ``inf`` for an unstable predictor."""
    e = residuals(structure, theta, data)
    if e is None or e.size == 0:
        return float("inf")
    with np.errstate(over="ignore", invalid="ignore"):
        v = float(np.mean(e ** 2))
    return v if np.isfinite(v) else float("inf")


def fd_steps(theta, rel: float) -> np.ndarray:
    return rel * np.maximum(np.abs(theta), 1.0)


def jacobian(structure: ModelStructure, theta, data: DataRecord, rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the residual vector w.r.t. ``theta``."""
    theta = np.asarray(theta, dtype=float)
    h = fd_steps(theta, rel)
    cols = []
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h[i]
        tm[i] -= h[i]
        ep = residuals(structure, tp, data)
        em = residuals(structure, tm, data)
        if ep is None or em is None:
            raise PemError("finite-difference probe left the stability region")
        cols.append((ep - em) / (2.0 * h[i]))
    return np.column_stack(cols)


def loss_gradient(structure: ModelStructure, theta, data: DataRecord, rel: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of :func:`pem_loss`."""
    theta = np.asarray(theta, dtype=float)
    h = fd_steps(theta, rel)
    g = np.zeros(theta.size)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h[i]
        tm[i] -= h[i]
        g[i] = (pem_loss(structure, tp, data) - pem_loss(structure, tm, data)) / (2.0 * h[i])
    return g


def _levenberg_marquardt(structure, theta, data, opts: PemOptions):
    theta = np.asarray(theta, dtype=float).copy()
    e = residuals(structure, theta, data)
    m = e.size
    loss = float(e @ e) / m
    mu = opts.damping_init
    trace = [{"iteration": 0, "loss": loss, "damping": mu, "accepted": True}]
    status = "max_iterations"
    for it in range(1, opts.max_iterations + 1):
        J = jacobian(structure, theta, data, opts.fd_step)
        grad = 2.0 * (J.T @ e) / m
        if np.max(np.abs(grad)) < opts.gradient_tolerance:
            status = "gradient"
            break
        H = J.T @ J
        g = J.T @ e
        scale = np.diag(H).copy()
        scale[scale <= 0] = 1.0
        while True:
            try:
                step = -np.linalg.solve(H + mu * np.diag(scale), g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                cand = theta + step
                ec = residuals(structure, cand, data)
                if ec is not None:
                    lc = float(ec @ ec) / m
                    if np.isfinite(lc) and lc < loss:
                        break
            mu *= opts.damping_up
            if mu > opts.damping_max:
                trace.append({"iteration": it, "loss": loss, "damping": mu, "accepted": False})
                if np.max(np.abs(grad)) < 10.0 * opts.gradient_tolerance:
                    return theta, loss, "gradient", trace
                raise PemError("damping overflow without a decreasing step", trace)
        theta, e, loss = cand, ec, lc
        mu = max(mu / opts.damping_down, 1e-15)
        trace.append({"iteration": it, "loss": loss, "damping": mu, "accepted": True})
        if np.max(np.abs(step)) <= opts.step_tolerance * (1.0 + np.max(np.abs(theta))):
            status = "step"
            break
    return theta, loss, status, trace


def pem_estimate(
    structure: ModelStructure,
    data: DataRecord,
    theta0,
    opts: Optional[PemOptions] = None,
) -> EstimationResult:
    """Minimize :func:`pem_loss` from ``theta0`` plus seeded 5% perturbations of it.

    The best local minimum over the starts is returned. Starts whose predictor
    is unstable are skipped.
    """
    opts = opts or PemOptions()
    theta0 = np.asarray(theta0, dtype=float)
    gen = rng(opts.seed)
    starts = [theta0]
    for _ in range(opts.multistart - 1):
        d = gen.standard_normal(theta0.size)
        d *= opts.perturbation * max(np.linalg.norm(theta0), 1e-3) / np.linalg.norm(d)
        starts.append(theta0 + d)
    best = None
    runs = []
    for k, th in enumerate(starts):
        if not np.isfinite(pem_loss(structure, th, data)):
            runs.append({"start": k, "status": "unstable_start"})
            continue
        theta, loss, status, trace = _levenberg_marquardt(structure, th, data, opts)
        runs.append({"start": k, "status": status, "loss": loss, "iterations": len(trace) - 1})
        if best is None or loss < best[1]:
            best = (theta, loss, trace)
    if best is None:
        raise PemError("every start gives an unstable predictor")
    theta, loss, trace = best
    eps = prediction_error(structure, theta, data)
    phi = -jacobian(structure, theta, data, opts.fd_step)
    pad = np.zeros((structure.transient, theta.size))
    grad = loss_gradient(structure, theta, data, opts.fd_step)
    return EstimationResult(
        method="PEM",
        structure=structure,
        theta=theta,
        loss=loss,
        eps=eps,
        regressors=np.vstack([pad, phi]),
        pass_snapshots=[theta.copy()],
        stationarity={"gradient": grad.tolist(), "gradient_inf_norm": float(np.max(np.abs(grad)))},
        diagnostics={"starts": runs, "options": asdict(opts), "trace": trace},
    )
